"""Master-equation integration at each level of approximation.

Every tier runs in a frame co-rotating with the mechanical oscillators, so
the resonant effective tiers have constant generators.  The full and reduced
tiers use the bare frequencies; the effective tiers use whichever
frequencies the resonance condition was met for (light-shifted by default).
"""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .coeffs import CoefficientError, bs_coefficients, coupling_series, pa_coefficients
from .fock import (FockSpace, TRUNCATION_LIMIT, hermiticity_defect, ladder,
                   min_eigenvalue, partial_trace, top_level_population)
from .model import derived_scales, validate
from .observables import covariance, fidelity, occupations

DEFAULT_CAVITY_CUTOFF = 2
DEFAULT_MECH_CUTOFF = 6
TRACE_LIMIT = 1e-6
STEP_TOL = 1e-9


class ModelTier(enum.Enum):
    FullDisplaced = "full"
    ReducedTimeDependent = "reduced"
    EffectiveBS = "bs"
    EffectivePA = "pa"
    PADissipatorOnly = "pa-dissipator"

    @classmethod
    def parse(cls, name) -> "ModelTier":
        if isinstance(name, cls):
            return name
        for t in cls:
            if name in (t.value, t.name):
                return t
        raise ValueError(f"unknown tier {name!r}")


class SpaceError(ValueError):
    pass


class TierError(ValueError):
    """The parameters do not satisfy the resonance a tier assumes."""


class DiagnosticsError(RuntimeError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


def default_cutoffs(tier: ModelTier, mech=DEFAULT_MECH_CUTOFF, cavity=DEFAULT_CAVITY_CUTOFF):
    if tier is ModelTier.FullDisplaced:
        return (cavity, mech, mech)
    return (mech, mech)


# ---------------------------------------------------------------------------
# generator assembly

class Generator:
    """Collects terms ``c(t) L rho R`` before packing them for the kernels."""

    def __init__(self, space: FockSpace):
        self.space = space
        self._ops: list[np.ndarray] = []
        self._keys: dict[bytes, int] = {}
        self.terms: list[tuple[int, int, np.ndarray, np.ndarray]] = []
        self.frame_omegas = None

    def op(self, mat: np.ndarray) -> int:
        """Index of ``mat`` in the operator table; equal matrices share a slot."""
        mat = np.ascontiguousarray(mat, dtype=complex)
        key = mat.tobytes()
        if key not in self._keys:
            self._keys[key] = len(self._ops)
            self._ops.append(mat)
        return self._keys[key]

    def add(self, left, right, freqs, amps):
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        amps = np.atleast_1d(np.asarray(amps, dtype=complex))
        keep = amps != 0
        if keep.any():
            self.terms.append((left, right, freqs[keep], amps[keep]))

    def hamiltonian(self, mat, freqs, amps):
        """Adds ``-i[h(t) O + h.c., rho]`` with ``h(t) = sum amps e^{i freqs t}``."""
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        amps = np.atleast_1d(np.asarray(amps, dtype=complex))
        o = self.op(mat)
        od = self.op(mat.conj().T)
        self.add(o, -1, freqs, -1j * amps)
        self.add(-1, o, freqs, 1j * amps)
        self.add(od, -1, -freqs, -1j * amps.conj())
        self.add(-1, od, -freqs, 1j * amps.conj())

    def hermitian(self, mat, rate):
        """Adds ``-i[rate * mat, rho]`` for a Hermitian ``mat``."""
        o = self.op(mat)
        self.add(o, -1, 0.0, -1j * rate)
        self.add(-1, o, 0.0, 1j * rate)

    def lindblad(self, c, rate):
        if rate == 0:
            return
        if rate < 0:
            raise ValueError(f"negative Lindblad rate {rate}")
        o = self.op(c)
        od = self.op(c.conj().T)
        cdc = self.op(c.conj().T @ c)
        self.add(o, od, 0.0, rate)
        self.add(cdc, -1, 0.0, -0.5 * rate)
        self.add(-1, cdc, 0.0, -0.5 * rate)

    def pack(self) -> _kernels.PackedGenerator:
        if not self._ops:
            self.op(self.space.identity())
        off = np.concatenate([[0], np.cumsum([len(t[2]) for t in self.terms])]).astype(np.int64)
        freqs = np.concatenate([t[2] for t in self.terms]) if self.terms else np.zeros(0)
        amps = np.concatenate([t[3] for t in self.terms]) if self.terms else np.zeros(0, complex)
        return _kernels.PackedGenerator(
            self._ops, [t[0] for t in self.terms], [t[1] for t in self.terms], off, freqs, amps)


def _mech(space: FockSpace):
    m1, m2 = space.nmodes - 2, space.nmodes - 1
    return ladder(space, m1), ladder(space, m2)


def _add_thermal(gen: Generator, p):
    b1, b2 = _mech(gen.space)
    for b, gam, n in ((b1, p.gamma1, p.nth1), (b2, p.gamma2, p.nth2)):
        if gam > 0:
            gen.lindblad(b, gam * (n + 1))
            gen.lindblad(b.conj().T, gam * n)


def _full_generator(p, space, drive_term):
    gen = Generator(space)
    a = ladder(space, 0)
    b = _mech(space)
    ad = a.conj().T
    for j in range(2):
        bj = b[j]
        for k in range(2):
            amp = p.gs[j] * p.alphas[k]
            if amp == 0:
                continue
            D, w = p.Deltas[k], p.omegas[j]
            # a^dag b_j e^{i(D-w)t} + a^dag b_j^dag e^{i(D+w)t} + h.c.
            gen.hamiltonian(ad @ bj, D - w, amp)
            gen.hamiltonian(ad @ bj.conj().T, D + w, amp)
        if drive_term:
            # g_j |alpha(t)|^2 (b_j e^{-i w t} + h.c.)
            fr, am = [], []
            for k in range(2):
                for l in range(2):
                    fr.append(p.Deltas[k] - p.Deltas[l] - p.omegas[j])
                    am.append(p.gs[j] * p.alphas[k] * p.alphas[l])
            gen.hamiltonian(bj, fr, am)
    gen.lindblad(a, p.kappa)
    gen.frame_omegas = tuple(p.omegas)
    return gen


def _reduced_generator(p, space):
    gen = Generator(space)
    b1, b2 = _mech(space)
    bvec = [b1, b2, b1.conj().T, b2.conj().T]
    ser = coupling_series(p, "rotating")
    for r in range(4):
        for c in range(4):
            prod = bvec[r] @ bvec[c]
            if np.any(ser.M1[:, r, c] != 0):
                gen.add(gen.op(prod), -1, ser.freqs, ser.M1[:, r, c])
            if np.any(ser.M2[:, r, c] != 0):
                gen.add(-1, gen.op(prod), ser.freqs, ser.M2[:, r, c])
            if np.any(ser.M3[:, r, c] != 0):
                gen.add(gen.op(bvec[r]), gen.op(bvec[c]), ser.freqs, ser.M3[:, r, c])
    gen.frame_omegas = tuple(p.omegas)
    return gen


def _effective_generator(p, space, kind, dissipators, resonance):
    gen = Generator(space)
    b1, b2 = _mech(space)
    try:
        c = bs_coefficients(p, resonance) if kind == "BS" else pa_coefficients(p, resonance)
    except CoefficientError as exc:
        raise TierError(str(exc)) from None
    sc = derived_scales(p)
    r = np.sqrt(sc.G1 / sc.G2) if sc.G1 > 0 and sc.G2 > 0 else 1.0
    if kind == "BS":
        gen.hamiltonian(b1.conj().T @ b2, 0.0, c.JBS)
        B = r * b1 + b2 / r
    else:
        gen.hamiltonian(b1 @ b2, 0.0, c.JPA)
        B = r * b1 + b2.conj().T / r
    if dissipators:
        R = c.rates
        gen.lindblad(b1, R["cool1"])
        gen.lindblad(b1.conj().T, R["heat1"])
        gen.lindblad(b2, R["cool2"])
        gen.lindblad(b2.conj().T, R["heat2"])
        if kind == "BS":
            gen.lindblad(B, R["cool"])
            gen.lindblad(B.conj().T, R["heat"])
        else:
            gen.lindblad(B, R["GammaMinus"])
            gen.lindblad(B.conj().T, R["GammaPlus"])
    gen.frame_omegas = tuple(c.frequencies)
    return gen


def _pa_dissipator_generator(p, space, resonance):
    gen = Generator(space)
    b1, b2 = _mech(space)
    try:
        c = pa_coefficients(p, resonance)
    except CoefficientError as exc:
        raise TierError(str(exc)) from None
    sc = derived_scales(p)
    r = np.sqrt(sc.G1 / sc.G2)
    gen.lindblad((r * b1 + b2.conj().T / r).conj().T, c.GammaPlus)
    gen.frame_omegas = tuple(c.frequencies)
    return gen


def build_generator(tier, p, cutoffs=None, *, dissipators=True, thermal=True,
                    drive_term=False, resonance="auto") -> Generator:
    tier = ModelTier.parse(tier)
    validate(p)
    space = FockSpace(cutoffs or default_cutoffs(tier))
    want = 3 if tier is ModelTier.FullDisplaced else 2
    if space.nmodes != want:
        raise SpaceError(f"{tier.name} needs {want} modes, got cutoffs {space.cutoffs}")
    if tier is ModelTier.FullDisplaced:
        gen = _full_generator(p, space, drive_term)
    elif tier is ModelTier.ReducedTimeDependent:
        gen = _reduced_generator(p, space)
    elif tier is ModelTier.EffectiveBS:
        gen = _effective_generator(p, space, "BS", dissipators, resonance)
    elif tier is ModelTier.EffectivePA:
        gen = _effective_generator(p, space, "PA", dissipators, resonance)
    else:
        gen = _pa_dissipator_generator(p, space, resonance)
    if thermal:
        _add_thermal(gen, p)
    return gen


@lru_cache(maxsize=32)
def _packed(tier, p, cutoffs, dissipators, thermal, drive_term, resonance):
    gen = build_generator(tier, p, cutoffs, dissipators=dissipators, thermal=thermal,
                          drive_term=drive_term, resonance=resonance)
    return gen, gen.pack()


def rhs(tier, p, t, rho, cutoffs=None, **opts) -> np.ndarray:
    """Time derivative of ``rho`` under ``tier`` at time ``t``."""
    tier = ModelTier.parse(tier)
    cutoffs = tuple(cutoffs or default_cutoffs(tier))
    space = FockSpace(cutoffs)
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (space.dim, space.dim):
        raise SpaceError(f"rho shape {rho.shape} does not match cutoffs {cutoffs}")
    _, packed = _packed(tier, p, cutoffs, opts.get("dissipators", True),
                        opts.get("thermal", True), opts.get("drive_term", False),
                        opts.get("resonance", "auto"))
    return _kernels.rhs(packed, t, rho)


# ---------------------------------------------------------------------------
# integration

@dataclass
class Diagnostics:
    max_trace_defect: float
    max_herm_defect: float
    min_eigenvalue: float
    top_level_population: tuple
    nsteps: int
    nrejects: int
    final_dt: float
    status: int

    @property
    def truncation_ok(self) -> bool:
        return max(self.top_level_population) <= TRUNCATION_LIMIT

    @property
    def valid(self) -> bool:
        return (self.status == _kernels.STATUS_OK and self.max_trace_defect <= TRACE_LIMIT
                and self.truncation_ok)


@dataclass
class Trajectory:
    tier: ModelTier
    space: FockSpace
    times: np.ndarray
    states: np.ndarray
    diagnostics: Diagnostics
    frame_omegas: tuple = field(default=(0.0, 0.0))

    @property
    def mech_space(self) -> FockSpace:
        return FockSpace(self.space.cutoffs[-2:])

    def mechanical_states(self) -> np.ndarray:
        if self.space.nmodes == 2:
            return self.states
        keep = (self.space.nmodes - 2, self.space.nmodes - 1)
        return np.array([partial_trace(r, self.space, keep) for r in self.states])

    def occupations(self) -> np.ndarray:
        ms = self.mech_space
        return np.array([occupations(r, ms) for r in self.mechanical_states()])

    def covariances(self):
        ms = self.mech_space
        return [covariance(r, ms) for r in self.mechanical_states()]

    def observable(self, name: str) -> np.ndarray:
        if name in ("n1", "n2"):
            return self.occupations()[:, int(name[1]) - 1]
        if name == "trace":
            return np.trace(self.states, axis1=1, axis2=2).real
        if name == "duan":
            from .observables import duan_value
            return np.array([duan_value(c) for c in self.covariances()])
        if name in ("varX1", "varP1", "varX2", "varP2"):
            i = ("varX1", "varP1", "varX2", "varP2").index(name)
            return np.array([c.matrix[i, i] for c in self.covariances()])
        raise KeyError(f"unknown observable {name!r}")

    def to_csv(self, path, observables=("n1", "n2"), header=()):
        cols = [self.observable(o) for o in observables]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", *observables])
            for i, t in enumerate(self.times):
                w.writerow([f"{t:.17g}"] + [f"{c[i]:.17g}" for c in cols])


def _initial_dt(packed, span):
    scale = packed.max_frequency() + packed.norm_bound()
    return min(span, 0.5 / scale) if scale > 0 else span


def evolve(tier, p, rho0, t_end, dt=None, *, samples=101, times=None, cutoffs=None,
           strict=True, tol=STEP_TOL, dissipators=True, thermal=True,
           drive_term=False, resonance="auto") -> Trajectory:
    """Integrate from ``t = 0`` to ``t_end``.

    ``dt`` caps the step (default: no cap beyond the sample spacing); the
    step is halved until the step-doubling error estimate is below ``tol``.
    """
    tier = ModelTier.parse(tier)
    cutoffs = tuple(cutoffs or default_cutoffs(tier))
    space = FockSpace(cutoffs)
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (space.dim, space.dim):
        raise SpaceError(f"initial state shape {rho0.shape} does not match cutoffs {cutoffs}")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if times is None:
        times = np.linspace(0.0, t_end, samples)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("sample times must be non-negative and strictly increasing")
    gen, packed = _packed(tier, p, cutoffs, dissipators, thermal, drive_term, resonance)
    dt0 = _initial_dt(packed, float(times[-1]))
    dt_max = float(dt) if dt is not None else float(times[-1])
    dt0 = min(dt0, dt_max)
    states, herm, nsteps, nrej, dtf, status = _kernels.propagate(
        packed, rho0, 0.0, times, dt0, dt_max=dt_max, tol=tol)
    tr = np.abs(np.trace(states, axis1=1, axis2=2) - 1.0)
    tops = np.array([top_level_population(r, space) for r in states])
    diag = Diagnostics(
        max_trace_defect=float(tr.max()),
        max_herm_defect=float(max(herm.max(), max(hermiticity_defect(r) for r in states))),
        min_eigenvalue=float(min(min_eigenvalue(r) for r in states)),
        top_level_population=tuple(float(v) for v in tops.max(axis=0)),
        nsteps=int(nsteps), nrejects=int(nrej), final_dt=float(dtf), status=int(status))
    traj = Trajectory(tier, space, times, states, diag, gen.frame_omegas)
    if strict and not diag.valid:
        raise DiagnosticsError(
            f"{tier.name}: trace defect {diag.max_trace_defect:.2e}, top-level "
            f"population {max(diag.top_level_population):.2e}, status {diag.status}", traj)
    return traj


# ---------------------------------------------------------------------------
# tier comparison

def to_frame(states, times, from_omegas, to_omegas, space: FockSpace):
    """Re-express mechanical states from one rotating frame in another."""
    b = _mech(space)
    n = [np.real(np.diag(x.conj().T @ x)) for x in b]
    dw = np.asarray(to_omegas) - np.asarray(from_omegas)
    out = np.empty_like(states)
    for i, t in enumerate(times):
        ph = np.exp(1j * t * (dw[0] * n[0] + dw[1] * n[1]))
        out[i] = ph[:, None] * states[i] * ph.conj()[None, :]
    return out


@dataclass
class TierReport:
    times: np.ndarray
    occupations: dict
    covariances: dict
    fidelities: dict
    max_relative_deviation: dict
    diagnostics: dict


def _run_tier(args):
    tier, p, rho0, t_end, cutoffs, samples, opts = args
    return evolve(tier, p, rho0, t_end, samples=samples, cutoffs=cutoffs, **opts)


def compare_tiers(p, rho0_mech, t_end, tiers=(ModelTier.FullDisplaced,
                  ModelTier.ReducedTimeDependent, ModelTier.EffectiveBS),
                  mech_cutoffs=None, cavity_cutoff=DEFAULT_CAVITY_CUTOFF, samples=201,
                  workers=1, **opts) -> TierReport:
    """Run several tiers from the same mechanical state and compare them.

    The relative occupation deviation between tiers A and B is
    ``max_t |n_A - n_B| / max_t n_B`` per mode.
    """
    tiers = [ModelTier.parse(t) for t in tiers]
    rho0_mech = np.asarray(rho0_mech, dtype=complex)
    if mech_cutoffs is None:
        n = int(round(np.sqrt(rho0_mech.shape[0])))
        mech_cutoffs = (n, n)
    ms = FockSpace(mech_cutoffs)
    if ms.dim != rho0_mech.shape[0]:
        raise SpaceError("initial mechanical state does not match mech_cutoffs")
    jobs = []
    for t in tiers:
        if t is ModelTier.FullDisplaced:
            vac = np.zeros((cavity_cutoff, cavity_cutoff), complex)
            vac[0, 0] = 1.0
            jobs.append((t, p, np.kron(vac, rho0_mech), t_end,
                         (cavity_cutoff,) + tuple(mech_cutoffs), samples, opts))
        else:
            jobs.append((t, p, rho0_mech, t_end, tuple(mech_cutoffs), samples, opts))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            trajs = list(ex.map(_run_tier, jobs))
    else:
        trajs = [_run_tier(j) for j in jobs]
    times = trajs[0].times
    ref = tuple(p.omegas)
    mech = {}
    for t, tr in zip(tiers, trajs):
        mech[t] = to_frame(tr.mechanical_states(), times, tr.frame_omegas, ref, ms)
    occ = {t: np.array([occupations(r, ms) for r in mech[t]]) for t in tiers}
    cov = {t: [covariance(r, ms) for r in mech[t]] for t in tiers}
    fid, dev = {}, {}
    for i, a in enumerate(tiers):
        for b in tiers[i + 1:]:
            fid[(a, b)] = np.array([fidelity(x, y) for x, y in zip(mech[a], mech[b])])
            scale = np.maximum(np.abs(occ[b]).max(axis=0), 1e-300)
            dev[(a, b)] = tuple(np.abs(occ[a] - occ[b]).max(axis=0) / scale)
    return TierReport(times, occ, cov, fid, dev, {t: tr.diagnostics for t, tr in zip(tiers, trajs)})
