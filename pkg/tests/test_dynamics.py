import csv

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from multimode_om import _kernels
from multimode_om.coeffs import (bs_coefficients, pa_coefficients, resonant_params,
                                 spring_shifts)
from multimode_om.dynamics import (DiagnosticsError, ModelTier, SpaceError, TierError,
                                   build_generator, compare_tiers, evolve, rhs, to_frame)
from multimode_om.fock import (FockSpace, coherent_single, fock_state, ladder,
                               partial_trace, product_state, random_density_matrix,
                               thermal_single, vacuum)
from multimode_om.model import from_scales
from multimode_om.observables import covariance

ALL_TIERS = ["full", "reduced", "bs", "pa", "pa-dissipator"]
SQ = np.sqrt(0.75)  # interference zero of J_BS at OmegaBar = kappa = 1


def bs_point(DeltaBar=1.5, G=0.01, **kw):
    p = from_scales(OmegaBar=1.0, deltaOmega=0.1, DeltaBar=DeltaBar, kappa=1.0, G1=G, G2=G, **kw)
    return resonant_params(p, "BS", DeltaBar)


def pa_point(DeltaBar=3.0, G=0.05, G2=None, **kw):
    p = from_scales(OmegaBar=1.0, deltaOmega=0.1, DeltaBar=DeltaBar, kappa=1.0, G1=G,
                    G2=G if G2 is None else G2, split=2.0, **kw)
    return resonant_params(p, "PA", DeltaBar)


def point_for(tier):
    return pa_point() if tier in ("pa", "pa-dissipator") else bs_point()


def low_state(cut, rng):
    """Random state supported below the top Fock level of each mode."""
    s = FockSpace(cut)
    sub = FockSpace(tuple(c - 1 for c in cut))
    r = random_density_matrix(sub.dim, rng=rng)
    idx = [int(np.ravel_multi_index(np.unravel_index(i, sub.cutoffs), cut)) for i in range(sub.dim)]
    rho = np.zeros((s.dim, s.dim), complex)
    rho[np.ix_(idx, idx)] = r
    return rho


@pytest.mark.parametrize("tier", ALL_TIERS)
def test_rhs_preserves_trace_and_hermiticity(tier):
    p = point_for(tier)
    cut = (2, 3, 3) if tier == "full" else (4, 4)
    rho = random_density_matrix(int(np.prod(cut)), rng=1)
    for t in (0.0, 1.7):
        d = rhs(tier, p, t, rho, cutoffs=cut)
        assert abs(np.trace(d)) < 1e-15
        assert np.abs(d - d.conj().T).max() < 1e-15


def test_rhs_without_coupling_is_zero():
    p = from_scales(G1=0.0, G2=0.0)
    rho = random_density_matrix(16, rng=2)
    assert np.abs(rhs("reduced", p, 0.3, rho, cutoffs=(4, 4))).max() == 0
    # the full tier keeps cavity loss, which is inert on the cavity vacuum
    full = product_state(vacuum(FockSpace((2,))), rho)
    assert np.abs(rhs("full", p, 0.3, full, cutoffs=(2, 4, 4))).max() == 0


def test_effective_bs_coherent_part_is_exchange():
    p = bs_point()
    J = bs_coefficients(p).JBS
    s = FockSpace((4, 4))
    b1, b2 = ladder(s, 0), ladder(s, 1)
    H = J * (b1.conj().T @ b2 + b2.conj().T @ b1)
    rho = random_density_matrix(16, rng=3)
    got = rhs("bs", p, 0.0, rho, cutoffs=(4, 4), dissipators=False, thermal=False)
    assert np.allclose(got, -1j * (H @ rho - rho @ H), atol=1e-18)


@pytest.mark.parametrize("mode", ["BS", "PA"])
def test_effective_equals_resonant_reduced_plus_spring(mode):
    # static part of the rotating-frame generator at bare resonance
    if mode == "BS":
        p = resonant_params(from_scales(DeltaBar=0.7, G1=0.01, G2=0.013), "BS", 0.7, bare=True)
    else:
        p = resonant_params(from_scales(DeltaBar=3.0, G1=0.01, G2=0.013, split=2.0), "PA", 3.0,
                            bare=True)
    cut = (5, 5)
    red = build_generator("reduced", p, cut, thermal=False).pack()
    amps = np.where(np.abs(red.freqs) < 1e-9, red.amps, 0)
    static = _kernels.PackedGenerator(red.ops, red.left, red.right, red.coef_off, red.freqs, amps)
    eff = build_generator(mode.lower(), p, cut, thermal=False, resonance="bare").pack()
    s = FockSpace(cut)
    d1, d2 = spring_shifts(p)
    H = d1 * ladder(s, 0).conj().T @ ladder(s, 0) + d2 * ladder(s, 1).conj().T @ ladder(s, 1)
    # the truncated b b^dag differs at the top level, so stay below it
    rho = low_state(cut, 4)
    want = _kernels.rhs(eff, 0.0, rho) - 1j * (H @ rho - rho @ H)
    assert np.abs(_kernels.rhs(static, 0.0, rho) - want).max() < 1e-17


def test_full_tier_against_kron_hamiltonian():
    p = from_scales(DeltaBar=1.5, G1=0.02, G2=0.03, split=0.3)
    p = p.replace(alpha2=7.0)
    cut = (3, 3, 3)
    s = FockSpace(cut)
    a = np.kron(np.diag(np.sqrt(np.arange(1, 3)), 1), np.eye(9))
    b = [np.kron(np.eye(3), np.kron(np.diag(np.sqrt(np.arange(1, 3)), 1), np.eye(3))),
         np.kron(np.eye(9), np.diag(np.sqrt(np.arange(1, 3)), 1))]
    assert np.array_equal(a, ladder(s, 0))
    rho = random_density_matrix(27, rng=5)
    for t in (0.0, 0.9, 13.2):
        cav = sum(p.alphas[k] * np.exp(1j * p.Deltas[k] * t) for k in range(2)) * a.conj().T
        cav = cav + cav.conj().T
        H = sum(p.gs[j] * cav @ (b[j] * np.exp(-1j * p.omegas[j] * t)
                                 + b[j].conj().T * np.exp(1j * p.omegas[j] * t)) for j in range(2))
        want = -1j * (H @ rho - rho @ H)
        want += p.kappa * (a @ rho @ a.conj().T - 0.5 * (a.conj().T @ a @ rho + rho @ a.conj().T @ a))
        got = rhs("full", p, t, rho, cutoffs=cut)
        assert np.abs(got - want).max() < 1e-15


def test_static_state_without_coupling():
    p = from_scales(G1=0.0, G2=0.0)
    rho = random_density_matrix(16, rng=6)
    tr = evolve("reduced", p, rho, 50.0, samples=5, cutoffs=(4, 4), strict=False)
    assert np.abs(tr.states - rho).max() < 1e-14


def test_rabi_swap():
    p = bs_point()
    J = bs_coefficients(p).JBS
    s = FockSpace((3, 3))
    T = np.pi / (2 * abs(J))
    tr = evolve("bs", p, fock_state(s, [1, 0]), T, samples=3, cutoffs=(3, 3),
                dissipators=False, thermal=False)
    # step tolerance is 1e-9 per step; allow the accumulated error
    assert tr.occupations()[-1] == pytest.approx([0.0, 1.0], abs=1e-7)
    assert tr.occupations()[1] == pytest.approx([0.5, 0.5], abs=1e-7)


def test_two_mode_squeezing_growth():
    p = pa_point()
    J = abs(pa_coefficients(p).JPA)
    s = FockSpace((16, 16))
    T = 0.6 / J
    tr = evolve("pa", p, vacuum(s), T, samples=7, cutoffs=(16, 16),
                dissipators=False, thermal=False)
    want = np.sinh(J * tr.times) ** 2
    occ = tr.occupations()
    assert np.abs(occ[:, 0] - want).max() < 1e-7
    assert np.abs(occ[:, 1] - want).max() < 1e-7


def test_pa_dissipator_moments():
    p = pa_point()
    G = pa_coefficients(p).GammaPlus
    # the state grows heavy tails; below G t = 1/2 cutoff 20 keeps moments to ~1e-8
    cut = (20, 20)
    tr = evolve("pa-dissipator", p, vacuum(FockSpace(cut)), 0.5 / G, samples=11, cutoffs=cut,
                thermal=False)
    gt = G * tr.times
    covs = tr.covariances()
    vx1 = np.array([c.matrix[0, 0] for c in covs])
    vdiff = np.array([c.var([1, 0, -1, 0]) for c in covs])
    vsum_p = np.array([c.var([0, 1, 0, 1]) for c in covs])
    assert np.abs(vx1 - (0.25 + gt / 2 + gt ** 2 / 8)).max() < 1e-6
    assert np.abs(vdiff - (0.5 + gt + gt ** 2 / 2)).max() < 1e-6
    assert np.abs(vsum_p - (0.5 + gt + gt ** 2 / 2)).max() < 1e-6
    # the measured combinations stay at vacuum
    assert np.abs(np.array([c.var([1, 0, 1, 0]) for c in covs]) - 0.5).max() < 1e-6


def _moment_rhs(rates, r, J=0.0):
    """d n / dt for n_ij = <b_i^dag b_j> under the effective beam-splitter tier."""
    e = np.eye(2)
    u = np.array([r, 1 / r])
    cools = [(rates["cool1"], e[0]), (rates["cool2"], e[1]), (rates["cool"], u)]
    heats = [(rates["heat1"], e[0]), (rates["heat2"], e[1]), (rates["heat"], u)]
    h = np.array([[0, J], [J, 0]])

    def f(_, y):
        n = y.reshape(2, 2)
        d = 1j * (h @ n - n @ h).T
        for g, v in cools:
            K = np.outer(v, v)
            d -= 0.5 * g * (K @ n + n @ K)
        for g, v in heats:
            H = np.outer(v, v)
            d += 0.5 * g * (n @ H + H @ n) + g * H
        return d.ravel()
    return f


def test_bs_moments_and_steady_state():
    # at the bare resonance the zero sits exactly at DeltaBar^2 = OmegaBar^2 - kappa^2/4
    p = resonant_params(from_scales(DeltaBar=SQ, G1=0.05, G2=0.04), "BS", SQ, bare=True)
    c = bs_coefficients(p, "bare")
    assert abs(c.JBS) < 1e-12
    r = np.sqrt(0.05 / 0.04)
    cut = (7, 7)
    s = FockSpace(cut)
    rho0 = product_state(thermal_single(7, 0.05), fock_state(FockSpace((7,)), [1]))
    T = 400.0
    tr = evolve("bs", p, rho0, T, samples=9, cutoffs=cut, thermal=False, resonance="bare")
    b1, b2 = ladder(s, 0), ladder(s, 1)
    n12 = np.array([np.trace(x @ b1.conj().T @ b2) for x in tr.states])
    ode = solve_ivp(_moment_rhs(c.rates, r), (0, T), np.diag([0.05, 1.0]).astype(complex).ravel(),
                    t_eval=tr.times, rtol=1e-11, atol=1e-13)
    occ = tr.occupations()
    assert np.abs(occ[:, 0] - ode.y[0].real).max() < 2e-5
    assert np.abs(occ[:, 1] - ode.y[3].real).max() < 2e-5
    assert np.abs(n12 - ode.y[1]).max() < 2e-5
    # stationary point of the moment equations: A n + n A + C = 0 is linear in n
    f = _moment_rhs(c.rates, r)
    Mlin = np.column_stack([f(0, v) - f(0, np.zeros(4)) for v in np.eye(4)])
    nss = np.linalg.solve(Mlin, -f(0, np.zeros(4))).reshape(2, 2)
    assert np.all(np.diag(nss).real > 0)
    long = evolve("bs", p, vacuum(s), 3000.0, samples=2, cutoffs=cut, thermal=False,
                  resonance="bare")
    assert long.occupations()[-1] == pytest.approx(np.diag(nss).real, abs=1e-5)


def test_spring_shift_rotates_phase():
    # a single coupled mode driven at Delta = omega1; in the frame at the bare
    # frequency <b1> picks up exp(-i dOmega t).  Corrections are O(G^2) relative.
    p = from_scales(DeltaBar=1.0, G1=0.03, G2=0.0, split=0.1, deltaOmega=0.1)
    p = p.replace(alpha2=0.0, Delta1=p.omega1)
    d1 = spring_shifts(p)[0]
    assert d1 < 0
    cut = (8, 2)
    rho0 = product_state(coherent_single(8, 0.5), vacuum(FockSpace((2,))))
    T = 0.5 / abs(d1)
    tr = evolve("reduced", p, rho0, T, samples=41, cutoffs=cut, thermal=False)
    b = ladder(FockSpace(cut), 0)
    mean = np.array([np.trace(x @ b) for x in tr.states])
    phase = np.unwrap(np.angle(mean))
    slope = np.polyfit(tr.times, phase, 1)[0]
    assert slope == pytest.approx(-d1, rel=0.01)


def test_thermal_bath_relaxation():
    p = from_scales(G1=0.0, G2=0.0, gamma1=0.2, gamma2=0.1, nth1=0.3, nth2=0.0)
    cut = (14, 6)
    s = FockSpace(cut)
    tr = evolve("reduced", p, fock_state(s, [0, 2]), 10.0, samples=6, cutoffs=cut)
    occ = tr.occupations()
    assert np.abs(occ[:, 0] - 0.3 * (1 - np.exp(-0.2 * tr.times))).max() < 1e-7
    assert np.abs(occ[:, 1] - 2 * np.exp(-0.1 * tr.times)).max() < 1e-7


def test_compare_tiers_without_coupling():
    p = from_scales(G1=0.0, G2=0.0)
    rho0 = fock_state(FockSpace((3, 3)), [1, 0])
    rep = compare_tiers(p, rho0, 20.0, samples=5, resonance="bare")
    for dev in rep.max_relative_deviation.values():
        assert max(dev) < 1e-12
    for fid in rep.fidelities.values():
        assert np.all(fid > 1 - 1e-9)


def test_rotating_wave_error_shrinks_with_coupling():
    devs = []
    for G in (0.1, 0.05, 0.025):
        p = bs_point(G=G)
        J = abs(bs_coefficients(p).JBS)
        rho0 = fock_state(FockSpace((6, 6)), [1, 0])
        rep = compare_tiers(p, rho0, 1.0 / J, tiers=("reduced", "bs"), samples=21)
        devs.append(max(rep.max_relative_deviation[(ModelTier.ReducedTimeDependent,
                                                    ModelTier.EffectiveBS)]))
    assert devs[0] > devs[1] > devs[2]


def test_to_frame_round_trip():
    s = FockSpace((3, 3))
    rho = random_density_matrix(9, rng=7)
    ts = np.array([0.0, 1.3])
    there = to_frame(np.array([rho, rho]), ts, (1.0, 0.9), (1.1, 0.8), s)
    back = to_frame(there, ts, (1.1, 0.8), (1.0, 0.9), s)
    assert np.allclose(back, rho)
    assert np.allclose(there[0], rho)


def test_truncation_raises_diagnostics_error():
    p = pa_point()
    J = abs(pa_coefficients(p).JPA)
    s = FockSpace((3, 3))
    with pytest.raises(DiagnosticsError) as exc:
        evolve("pa", p, vacuum(s), 2.0 / J, samples=5, cutoffs=(3, 3))
    tr = exc.value.trajectory
    assert not tr.diagnostics.valid and not tr.diagnostics.truncation_ok
    loose = evolve("pa", p, vacuum(s), 2.0 / J, samples=5, cutoffs=(3, 3), strict=False)
    assert loose.diagnostics.max_trace_defect < 1e-9


def test_space_and_tier_errors():
    p = bs_point()
    with pytest.raises(SpaceError):
        evolve("bs", p, vacuum(FockSpace((3, 3))), 1.0, cutoffs=(4, 4))
    with pytest.raises(SpaceError):
        build_generator("full", p, (4, 4))
    with pytest.raises(TierError):
        build_generator("pa", p, (3, 3))
    with pytest.raises(ValueError):
        ModelTier.parse("nonsense")
    assert ModelTier.parse("EffectiveBS") is ModelTier.parse("bs")


def test_trajectory_csv(tmp_path):
    p = from_scales(G1=0.0, G2=0.0, gamma1=0.1, nth1=0.5)
    tr = evolve("reduced", p, vacuum(FockSpace((10, 3))), 1.0, samples=3, cutoffs=(10, 3))
    f = tmp_path / "t.csv"
    tr.to_csv(f, ("n1", "trace", "duan"), header=["tier reduced"])
    lines = f.read_text().splitlines()
    assert lines[0] == "# tier reduced"
    rows = list(csv.DictReader(lines[1:]))
    assert [float(r["time"]) for r in rows] == [0.0, 0.5, 1.0]
    assert float(rows[-1]["trace"]) == pytest.approx(1.0, abs=1e-12)
    assert float(rows[0]["duan"]) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(KeyError):
        tr.observable("n3")


def test_full_tier_cavity_stays_near_vacuum():
    p = bs_point(G=0.01)
    cut = (3, 4, 4)
    s = FockSpace(cut)
    rho0 = product_state(vacuum(FockSpace((3,))), fock_state(FockSpace((4, 4)), [1, 0]))
    tr = evolve("full", p, rho0, 20.0, samples=5, cutoffs=cut)
    cav = np.array([partial_trace(x, s, [0])[0, 0].real for x in tr.states])
    # the cavity only picks up O((G/kappa)^2) excitation
    assert cav.min() > 1 - 20 * 0.01 ** 2
    assert covariance(tr.mechanical_states()[-1], tr.mech_space).matrix.shape == (4, 4)
