"""Closed-form coefficients of the cavity-mediated two-oscillator coupling.

Operator ordering for all 4x4 matrices is ``(b1, b2, b1^dag, b2^dag)``.  The
reduced master equation reads

    drho/dt = -i[H_m, rho] + (b^T M1 b) rho + rho (b^T M2 b) + b^T M3 rho b

and every matrix entry is a short sum of complex exponentials in time.  Those
Fourier components are what :func:`coupling_series` returns; evaluating them at
a given time gives :func:`coupling_matrices`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .model import SystemParams, derived_scales, validate

RESONANCE_TOL = 1e-6
FREQ_TOL = 1e-9

# sign of the rotating-frame phase: b -> b e^{-i w t}, b^dag -> b^dag e^{+i w t}
_SIGMA = np.array([-1, -1, 1, 1])
_MODE = np.array([0, 1, 0, 1])


class CoefficientError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


def _lor(kappa, x):
    return 0.25 * kappa * kappa + x * x


def _chi(kappa, x):
    return 1.0 / (0.5 * kappa + 1j * x)


# ---------------------------------------------------------------------------
# M-matrices

@dataclass(frozen=True)
class CouplingMatrices:
    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    t: float
    frame: str

    def blocks(self, which: int):
        """Return ``(D-, O-, O+, D+)`` of M1, M2 or M3."""
        M = (self.M1, self.M2, self.M3)[which - 1]
        return M[:2, :2], M[:2, 2:], M[2:, :2], M[2:, 2:]


@dataclass(frozen=True)
class CouplingSeries:
    """``M_i(t) = sum_f exp(i freqs[f] t) M_i[f]``."""
    freqs: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    frame: str

    def at(self, t, resonant_only=False, tol=FREQ_TOL) -> CouplingMatrices:
        ph = np.exp(1j * self.freqs * t)
        if resonant_only:
            ph = np.where(np.abs(self.freqs) < tol, 1.0, 0.0)
        return CouplingMatrices(
            np.tensordot(ph, self.M1, 1), np.tensordot(ph, self.M2, 1),
            np.tensordot(ph, self.M3, 1), t, self.frame)


def coupling_series(p: SystemParams, frame="lab", omegas=None) -> CouplingSeries:
    """Fourier decomposition of M1, M2, M3.

    ``frame="rotating"`` multiplies each entry by the phase picked up by its
    two ladder operators in the frame co-rotating at ``omegas`` (defaults to
    the bare mechanical frequencies).
    """
    if frame not in ("lab", "rotating"):
        raise ValueError(f"unknown frame {frame!r}")
    w = np.asarray(p.omegas if omegas is None else omegas, dtype=float)
    wbare = np.asarray(p.omegas, dtype=float)
    g = np.asarray(p.gs, dtype=float)
    al = np.asarray(p.alphas, dtype=float)
    De = np.asarray(p.Deltas, dtype=float)
    kap = p.kappa

    comps: dict[float, np.ndarray] = {}

    def add(freq, which, r, c, val):
        key = round(float(freq), 12)
        if key not in comps:
            comps[key] = np.zeros((3, 4, 4), dtype=complex)
        comps[key][which, r, c] += val

    for r in range(4):
        m, sr = _MODE[r], _SIGMA[r]
        for c in range(4):
            n, sc = _MODE[c], _SIGMA[c]
            gg = g[m] * g[n]
            fr = (sr * w[m] + sc * w[n]) if frame == "rotating" else 0.0
            for k in range(2):
                for l in range(2):
                    aa = al[k] * al[l] * gg
                    if aa == 0.0:
                        continue
                    up = De[l] - De[k]
                    add(up + fr, 0, r, c, -aa * _chi(kap, De[l] + sc * wbare[n]))
                    add(-up + fr, 1, r, c, -aa * np.conj(_chi(kap, De[l] - sr * wbare[m])))
                    add(up + fr, 2, r, c, aa * _chi(kap, De[l] + sr * wbare[m]))
                    add(-up + fr, 2, r, c, aa * np.conj(_chi(kap, De[l] - sc * wbare[n])))

    keys = sorted(comps)
    if not keys:
        z = np.zeros((1, 4, 4), dtype=complex)
        return CouplingSeries(np.zeros(1), z, z.copy(), z.copy(), frame)
    stack = np.array([comps[k] for k in keys])
    return CouplingSeries(np.array(keys), stack[:, 0], stack[:, 1], stack[:, 2], frame)


def coupling_matrices(p: SystemParams, t: float = 0.0, frame="lab",
                      resonant_only=False, omegas=None) -> CouplingMatrices:
    validate(p)
    return coupling_series(p, frame, omegas).at(t, resonant_only)


# ---------------------------------------------------------------------------
# optical springs

def spring_shift(p: SystemParams, i: int) -> float:
    """Static light-induced frequency shift of oscillator ``i`` (0 or 1).

    This is the coefficient of ``b_i^dag b_i`` in the coherent part of the
    reduced equation: negative (softening) for red detuning in the bad-cavity
    limit and exactly zero for resonant pumps.
    """
    w, g = p.omegas[i], p.gs[i]
    kap = p.kappa
    s = 0.0
    for a, D in zip(p.alphas, p.Deltas):
        s += a * a * ((D - w) / _lor(kap, D - w) + (D + w) / _lor(kap, D + w))
    return -g * g * s


def spring_shifts(p: SystemParams) -> tuple[float, float]:
    return spring_shift(p, 0), spring_shift(p, 1)


def optical_spring_timeseries(p: SystemParams, i: int, times) -> np.ndarray:
    """Instantaneous shift ``dOmega_i + R_i(t)`` in the Hamiltonian sign convention."""
    ser = coupling_series(p, "lab")
    ph = np.exp(1j * np.outer(np.atleast_1d(times), ser.freqs))
    val = ph @ (ser.M1[:, 2 + i, i] - ser.M2[:, i, 2 + i])
    return -val.imag


def spring_constant(p: SystemParams, t) -> np.ndarray:
    """Inter-oscillator optical spring, scaled by the zero-point lengths."""
    ser = coupling_series(p, "lab")
    ph = np.exp(1j * np.outer(np.atleast_1d(t), ser.freqs))
    val = ph @ (ser.M1[:, 2, 1] - ser.M2[:, 1, 2])
    out = -val.imag / (p.zHO1 * p.zHO2)
    return out if np.ndim(t) else float(out[0])


# ---------------------------------------------------------------------------
# sidebands

@dataclass(frozen=True)
class Sideband:
    frequency: float
    amplitude: complex
    pump: int
    oscillator: int
    branch: int  # +1 or -1


@dataclass(frozen=True)
class SidebandSpectrum:
    lines: tuple[Sideband, ...]

    def matches(self, tol=1e-9):
        """Groups of lines from different (pump, oscillator) pairs that overlap."""
        groups, used = [], set()
        for a, la in enumerate(self.lines):
            if a in used:
                continue
            grp = [la]
            for b in range(a + 1, len(self.lines)):
                lb = self.lines[b]
                if b not in used and abs(la.frequency - lb.frequency) < tol:
                    grp.append(lb)
                    used.add(b)
            if len(grp) > 1:
                used.add(a)
                groups.append(tuple(grp))
        return groups

    def unmatched(self, tol=1e-9):
        hit = {id(l) for g in self.matches(tol) for l in g}
        return [l for l in self.lines if id(l) not in hit]


def sideband_spectrum(p: SystemParams) -> SidebandSpectrum:
    lines = []
    for k in range(2):
        for j in range(2):
            for s in (-1, 1):
                f = p.Deltas[k] + s * p.omegas[j]
                amp = p.gs[j] * p.alphas[k] * _chi(p.kappa, f)
                lines.append(Sideband(f, amp, k + 1, j + 1, s))
    return SidebandSpectrum(tuple(lines))


# ---------------------------------------------------------------------------
# effective rates, vectorised over detuning

def jbs(DeltaBar, OmegaBar, kappa, G1, G2):
    D = np.asarray(DeltaBar, dtype=float)
    return np.imag(G1 * G2 * (kappa + 2j * D)
                   / (kappa ** 2 / 4 + OmegaBar ** 2 - D ** 2 + 1j * kappa * D))


def jpa(DeltaBar, deltaOmega, kappa, G1, G2):
    D = np.asarray(DeltaBar, dtype=float)
    return np.imag(G1 * G2 * (kappa + 2j * D)
                   / (kappa ** 2 / 4 + deltaOmega ** 2 / 4 - D ** 2 + 1j * kappa * D))


def bs_rates(DeltaBar, OmegaBar, deltaOmega, kappa, G1, G2) -> dict:
    """All beam-splitter rates. Products with the occupations use cancelled forms."""
    D = np.asarray(DeltaBar, dtype=float)
    Om, dw, k = OmegaBar, deltaOmega, kappa
    out = {"JBS": jbs(D, Om, k, G1, G2)}
    with np.errstate(divide="ignore", invalid="ignore"):
        out["GammaBar1"] = 4 * G1 ** 2 * k * D * (Om + dw) / (_lor(k, D - Om - dw) * _lor(k, D + Om + dw))
        out["GammaBar2"] = 4 * G2 ** 2 * k * D * (Om - dw) / (_lor(k, D + Om - dw) * _lor(k, D - Om + dw))
        out["GammaBar"] = 4 * G1 * G2 * k * D * Om / (_lor(k, D - Om) * _lor(k, D + Om))
        out["nBar1"] = _lor(k, D - Om - dw) / (4 * D * (Om + dw))
        out["nBar2"] = _lor(k, D - Om + dw) / (4 * D * (Om - dw))
        out["nBar"] = _lor(k, D - Om) / (4 * D * Om)
    # heating (L(c^dag)) and cooling (L(c)) rates of each channel
    out["heat1"] = G1 ** 2 * k / _lor(k, D + Om + dw)
    out["heat2"] = G2 ** 2 * k / _lor(k, D + Om - dw)
    out["heat"] = G1 * G2 * k / _lor(k, D + Om)
    out["cool1"] = G1 ** 2 * k / _lor(k, D - Om - dw)
    out["cool2"] = G2 ** 2 * k / _lor(k, D - Om + dw)
    out["cool"] = G1 * G2 * k / _lor(k, D - Om)
    out["GammaTotal"] = out["heat"] + out["heat1"] + out["heat2"]
    return out


def pa_rates(DeltaBar, OmegaBar, deltaOmega, kappa, G1, G2) -> dict:
    D = np.asarray(DeltaBar, dtype=float)
    Om, dw, k = OmegaBar, deltaOmega, kappa
    s1, s2 = 2 * Om + dw / 2, 2 * Om - dw / 2
    out = {"JPA": jpa(D, dw, k, G1, G2)}
    with np.errstate(divide="ignore", invalid="ignore"):
        out["GammaBar1"] = 4 * G1 ** 2 * k * D * s1 / (_lor(k, D - s1) * _lor(k, D + s1))
        out["GammaBar2"] = 4 * G2 ** 2 * k * D * s2 / (_lor(k, D - s2) * _lor(k, D + s2))
        out["nBar1"] = _lor(k, D - s1) / (4 * D * s1)
        out["nBar2"] = _lor(k, D - s2) / (4 * D * s2)
    out["GammaPlus"] = G1 * G2 * k / _lor(k, D + dw / 2)
    out["GammaMinus"] = G1 * G2 * k / _lor(k, D - dw / 2)
    out["heat1"] = G1 ** 2 * k / _lor(k, D + s1)
    out["heat2"] = G2 ** 2 * k / _lor(k, D + s2)
    out["cool1"] = G1 ** 2 * k / _lor(k, D - s1)
    out["cool2"] = G2 ** 2 * k / _lor(k, D - s2)
    out["GammaTotal"] = out["heat1"] + out["heat2"] + out["GammaPlus"] + out["GammaMinus"]
    out["xiPA"] = np.abs(out["JPA"]) / out["GammaTotal"]
    return out


@dataclass(frozen=True)
class CoeffSetBS:
    JBS: float
    GammaBar1: float
    GammaBar2: float
    GammaBar: float
    nBar1: float
    nBar2: float
    nBar: float
    GammaTotal: float
    rates: dict = field(repr=False, default_factory=dict)
    frequencies: tuple = (0.0, 0.0)

    @property
    def anti_damped(self) -> tuple[bool, bool, bool]:
        return (self.nBar1 < 0, self.nBar2 < 0, self.nBar < 0)


@dataclass(frozen=True)
class CoeffSetPA:
    JPA: float
    GammaBar1: float
    GammaBar2: float
    GammaPlus: float
    GammaMinus: float
    nBar1: float
    nBar2: float
    xiPA: float
    rates: dict = field(repr=False, default_factory=dict)
    frequencies: tuple = (0.0, 0.0)

    @property
    def anti_damped(self) -> tuple[bool, bool]:
        return (self.nBar1 < 0, self.nBar2 < 0)


def _resonant_frequencies(p: SystemParams, mode: str, resonance: str, tol: float):
    """Pick the mechanical frequencies the resonance condition holds for."""
    split = p.Delta1 - p.Delta2
    bare = np.array(p.omegas)
    shifted = bare + np.array(spring_shifts(p))

    def mismatch(w):
        return split - ((w[0] - w[1]) if mode == "BS" else (w[0] + w[1]))

    if resonance not in ("auto", "bare", "shifted"):
        raise ValueError(f"unknown resonance mode {resonance!r}")
    order = {"auto": ("shifted", "bare"), "bare": ("bare",), "shifted": ("shifted",)}[resonance]
    cand = {"bare": bare, "shifted": shifted}
    scale = 0.5 * (bare[0] + bare[1])
    for name in order:
        if abs(mismatch(cand[name])) < tol * scale:
            return cand[name]
    raise CoefficientError(
        f"{mode} resonance not satisfied: bare mismatch {mismatch(bare):.3e}, "
        f"shifted mismatch {mismatch(shifted):.3e} (tolerance {tol:g})")


def _check_equal_alpha(p):
    if not np.isclose(p.alpha1, p.alpha2, rtol=1e-12, atol=0.0):
        raise CoefficientError(
            "closed-form rates assume alpha1 == alpha2; use coupling_matrices "
            "for the general case")


def bs_coefficients(p: SystemParams, resonance="auto", tol=RESONANCE_TOL) -> CoeffSetBS:
    validate(p)
    _check_equal_alpha(p)
    w = _resonant_frequencies(p, "BS", resonance, tol)
    sc = derived_scales(p)
    r = bs_rates(sc.DeltaBar, 0.5 * (w[0] + w[1]), w[0] - w[1], p.kappa, sc.G1, sc.G2)
    r = {k: float(v) for k, v in r.items()}
    return CoeffSetBS(r["JBS"], r["GammaBar1"], r["GammaBar2"], r["GammaBar"],
                      r["nBar1"], r["nBar2"], r["nBar"], r["GammaTotal"], r, tuple(w))


def pa_coefficients(p: SystemParams, resonance="auto", tol=RESONANCE_TOL) -> CoeffSetPA:
    validate(p)
    _check_equal_alpha(p)
    w = _resonant_frequencies(p, "PA", resonance, tol)
    sc = derived_scales(p)
    r = pa_rates(sc.DeltaBar, 0.5 * (w[0] + w[1]), w[0] - w[1], p.kappa, sc.G1, sc.G2)
    r = {k: float(v) for k, v in r.items()}
    return CoeffSetPA(r["JPA"], r["GammaBar1"], r["GammaBar2"], r["GammaPlus"],
                      r["GammaMinus"], r["nBar1"], r["nBar2"], r["xiPA"], r, tuple(w))


def resonant_couplings(p: SystemParams, mode: str, omegas=None) -> float:
    """Coherent rate read off the time-independent rotating-frame M1 entries.

    Independent of the closed forms: it sums the raw Lorentzian amplitudes of
    the matched sidebands.
    """
    M1 = coupling_series(p, "rotating", omegas).at(0.0, resonant_only=True).M1
    if mode == "BS":
        return float(-(M1[2, 1] + M1[0, 3]).imag)
    if mode == "PA":
        return float(-(M1[0, 1] + M1[1, 0]).imag)
    raise ValueError(mode)


# ---------------------------------------------------------------------------
# interference zeros of J_BS

def jbs_zeros(p: SystemParams, span=5.0, points=2001, xtol=1e-12) -> list[float]:
    """Non-zero central detunings where the exchange rate vanishes."""
    sc = derived_scales(p)
    Om = sc.OmegaBar

    def f(D):
        return float(jbs(D, Om, p.kappa, sc.G1, sc.G2))

    grid = np.linspace(-span * Om, span * Om, points)
    vals = jbs(grid, Om, p.kappa, sc.G1, sc.G2)
    step = grid[1] - grid[0]
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if a <= 0.0 <= b:
            continue  # trivial zero at the symmetric point
        if fa == 0.0:
            if abs(a) > 0.5 * step:
                roots.append(float(a))
            continue
        if fa * fb < 0:
            roots.append(float(bisect(f, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps)))
    if vals[-1] == 0.0:
        roots.append(float(grid[-1]))
    return sorted(set(roots))


# ---------------------------------------------------------------------------
# self-consistent resonance detunings

@dataclass(frozen=True)
class ResonanceSolution:
    Delta1: float
    Delta2: float
    correction: float
    iterations: int
    residual: float
    shifts: tuple[float, float]


def resonance_detunings(mode: str, DeltaBar: float, p: SystemParams, damping=0.5,
                        max_iter=200, tol=1e-10) -> ResonanceSolution:
    """Pump detunings that put the beat note on the light-shifted resonance."""
    if mode not in ("BS", "PA"):
        raise ValueError(mode)
    w1, w2 = p.omegas
    Om = 0.5 * (w1 + w2)
    bare = (w1 - w2) if mode == "BS" else (w1 + w2)

    def target(split):
        q = p.replace(Delta1=DeltaBar + 0.5 * split, Delta2=DeltaBar - 0.5 * split)
        s1, s2 = spring_shifts(q)
        return bare + (s1 - s2 if mode == "BS" else s1 + s2), (s1, s2)

    split = bare
    residual = np.inf
    for it in range(max_iter + 1):
        new, shifts = target(split)
        residual = abs(split - new)
        if residual < tol * Om:
            s1, s2 = shifts
            corr = (s1 - s2) / (w1 - w2) if mode == "BS" else (s1 + s2) / (2 * Om)
            return ResonanceSolution(DeltaBar + 0.5 * split, DeltaBar - 0.5 * split,
                                     corr, it, residual, shifts)
        if it == max_iter:
            break
        split = (1 - damping) * split + damping * new
    raise ConvergenceError(
        f"resonance iteration did not converge in {max_iter} steps "
        f"(residual {residual:.3e})", residual)


def resonant_params(p: SystemParams, mode: str, DeltaBar: float, bare=False) -> SystemParams:
    """Copy of ``p`` with pump detunings placed on the chosen resonance."""
    if bare:
        split = (p.omega1 - p.omega2) if mode == "BS" else (p.omega1 + p.omega2)
        return p.replace(Delta1=DeltaBar + 0.5 * split, Delta2=DeltaBar - 0.5 * split)
    sol = resonance_detunings(mode, DeltaBar, p)
    return p.replace(Delta1=sol.Delta1, Delta2=sol.Delta2)
