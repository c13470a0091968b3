"""Moments, Wigner functions and separability diagnostics of density matrices.

Quadratures are ``X = (b + b^dag)/2`` and ``P = (b - b^dag)/2i`` so the
vacuum variance is 1/4 and phase-space points are ``alpha = x + i p``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import sqrtm

from . import _kernels
from .fock import FockSpace, ladder

VACUUM_VAR = 0.25
ZERO_POINT_WIDTH = 0.5
MIN_POINTS_PER_WIDTH = 4


class GridError(ValueError):
    pass


def _as_space(space, rho) -> FockSpace:
    if space is None:
        n = int(round(np.sqrt(rho.shape[0])))
        if n * n != rho.shape[0]:
            raise ValueError("cannot infer a two-mode space; pass space explicitly")
        return FockSpace((n, n))
    if not isinstance(space, FockSpace):
        space = FockSpace(tuple(space))
    if space.dim != rho.shape[0]:
        raise ValueError(f"rho has dimension {rho.shape[0]}, space {space.cutoffs} needs {space.dim}")
    return space


def expect(op, rho) -> complex:
    return complex(np.trace(op @ rho))


def occupations(rho, space=None) -> np.ndarray:
    space = _as_space(space, rho)
    p = np.real(np.diag(rho)).reshape(space.cutoffs)
    out = []
    for m in range(space.nmodes):
        axes = tuple(a for a in range(space.nmodes) if a != m)
        out.append(float(np.arange(space.cutoffs[m]) @ p.sum(axis=axes)))
    return np.array(out)


# ---------------------------------------------------------------------------
# second moments

@dataclass(frozen=True)
class CovarianceMatrix:
    """Symmetrised covariances over ``(X1, P1, X2, P2)``."""
    matrix: np.ndarray
    mean: np.ndarray

    def var(self, weights) -> float:
        w = np.asarray(weights, dtype=float)
        return float(w @ self.matrix @ w)

    def uncertainty_products(self) -> np.ndarray:
        V = self.matrix
        return np.array([V[0, 0] * V[1, 1], V[2, 2] * V[3, 3]])


def quadratures(space: FockSpace, mode: int):
    b = ladder(space, mode)
    bd = b.conj().T
    return 0.5 * (b + bd), -0.5j * (b - bd)


def covariance(rho, space=None, modes=None) -> CovarianceMatrix:
    space = _as_space(space, rho)
    if modes is None:
        modes = (space.nmodes - 2, space.nmodes - 1)
    rho = np.asarray(rho, dtype=complex)
    R = []
    for m in modes:
        R.extend(sparse.csr_matrix(q) for q in quadratures(space, m))
    Y = [r @ rho for r in R]
    mean = np.array([np.trace(y).real for y in Y])
    V = np.empty((4, 4))
    for i in range(4):
        for j in range(i, 4):
            # Re tr(R_i R_j rho) is already the symmetrised moment
            s = R[i].multiply(Y[j].T).sum().real - mean[i] * mean[j]
            V[i, j] = V[j, i] = s
    return CovarianceMatrix(V, mean)


@dataclass(frozen=True)
class CollectiveMoments:
    mean: complex
    number: float
    commutator: float
    var_x: float
    var_p: float


def collective_operator(space: FockSpace, kind: str, G1: float, G2: float, modes=None):
    if G1 <= 0 or G2 <= 0:
        raise ValueError("collective mode needs G1, G2 > 0")
    if modes is None:
        modes = (space.nmodes - 2, space.nmodes - 1)
    b1, b2 = ladder(space, modes[0]), ladder(space, modes[1])
    r = np.sqrt(G1 / G2)
    if kind == "BS":
        return r * b1 + b2 / r
    if kind == "PA":
        return r * b1 + b2.conj().T / r
    raise ValueError(f"kind must be 'BS' or 'PA', got {kind!r}")


def collective_mode_moments(rho, kind, G1, G2, space=None) -> CollectiveMoments:
    space = _as_space(space, rho)
    B = collective_operator(space, kind, G1, G2)
    Bd = B.conj().T
    mean = expect(B, rho)
    X, P = 0.5 * (B + Bd), -0.5j * (B - Bd)
    mx, mp = mean.real, mean.imag
    return CollectiveMoments(
        mean=mean,
        number=expect(Bd @ B, rho).real,
        commutator=expect(B @ Bd - Bd @ B, rho).real,
        var_x=expect(X @ X, rho).real - mx * mx,
        var_p=expect(P @ P, rho).real - mp * mp,
    )


def duan_value(cov: CovarianceMatrix) -> float:
    """Half of Var(X1+X2) + Var(P1-P2), minimised over a phase rotation of mode 2.

    Separable states give at least 1/2.
    """
    V = cov.matrix
    A = V[0, 0] + V[1, 1] + V[2, 2] + V[3, 3]
    B = 2.0 * (V[0, 2] - V[1, 3])
    C = 2.0 * (V[0, 3] + V[1, 2])
    return 0.5 * (A - np.hypot(B, C))


def fidelity(rho, sigma) -> float:
    s = sqrtm(rho)
    val = np.trace(sqrtm(s @ sigma @ s)).real
    return float(min(max(val * val, 0.0), 1.0 + 1e-12))


# ---------------------------------------------------------------------------
# Wigner functions

@dataclass(frozen=True)
class WignerGrid:
    x: np.ndarray
    p: np.ndarray
    W: np.ndarray  # W[ix, ip]

    @property
    def step(self) -> tuple[float, float]:
        return float(self.x[1] - self.x[0]), float(self.p[1] - self.p[0])

    def integral(self) -> float:
        return float(np.trapezoid(np.trapezoid(self.W, self.p, axis=1), self.x))

    def marginal_x(self) -> np.ndarray:
        return np.trapezoid(self.W, self.p, axis=1)

    def to_csv(self, path):
        X, P = np.meshgrid(self.x, self.p, indexing="ij")
        data = np.column_stack([X.ravel(), P.ravel(), self.W.ravel()])
        np.savetxt(path, data, fmt="%.17g", delimiter=",", header="x,p,W", comments="")

    def to_pgm(self, path):
        """8-bit binary graymap, p increasing upwards, x to the right."""
        img = self.W.T[::-1]
        lo, hi = float(img.min()), float(img.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        pix = np.round((img - lo) * scale).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())


def half_max_width(grid: WignerGrid, axis: str) -> float:
    """Full width at half maximum through the peak along ``axis`` ('x' or 'p')."""
    i, j = np.unravel_index(np.argmax(grid.W), grid.W.shape)
    line, coord = (grid.W[:, j], grid.x) if axis == "x" else (grid.W[i, :], grid.p)
    half = 0.5 * line.max()
    above = np.nonzero(line >= half)[0]
    lo, hi = above[0], above[-1]

    def cross(a, b):
        return coord[a] + (half - line[a]) * (coord[b] - coord[a]) / (line[b] - line[a])

    left = cross(lo - 1, lo) if lo > 0 else coord[0]
    right = cross(hi, hi + 1) if hi < len(line) - 1 else coord[-1]
    return float(right - left)


def wigner(rho, xlim=(-3.0, 3.0), plim=(-3.0, 3.0), step=0.1) -> WignerGrid:
    """Single-mode Wigner function by displaced parity on a regular grid."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("wigner needs a square single-mode density matrix")
    if step > ZERO_POINT_WIDTH / MIN_POINTS_PER_WIDTH:
        raise GridError(f"grid step {step} is coarser than "
                        f"{MIN_POINTS_PER_WIDTH} points per zero-point width")
    nx = int(round((xlim[1] - xlim[0]) / step)) + 1
    npt = int(round((plim[1] - plim[0]) / step)) + 1
    if nx < 2 or npt < 2:
        raise GridError("grid needs at least two points per axis")
    xs = np.linspace(xlim[0], xlim[1], nx)
    ps = np.linspace(plim[0], plim[1], npt)
    return WignerGrid(xs, ps, _kernels.wigner_grid(rho, xs, ps))


# ---------------------------------------------------------------------------
# entanglement onset in the effective amplifier

@dataclass(frozen=True)
class XiReport:
    xiPA: float
    JPA: float
    times: np.ndarray
    duan: np.ndarray
    min_duan: float
    entangled: bool
    valid: bool
    t_trusted: float  # last sample time before truncation set in


def xi_trajectory_check(p, t_end=None, cutoffs=(10, 10), samples=101,
                        threshold=0.5 - 1e-9) -> XiReport:
    """Evolve the effective amplifier from vacuum and track the Duan value.

    The minimum is taken over the leading samples whose top-level population
    stays within the truncation limit, since a heated amplifier eventually
    outgrows any cutoff.
    """
    from .coeffs import pa_coefficients
    from .dynamics import ModelTier, evolve
    from .fock import TRUNCATION_LIMIT, top_level_population

    c = pa_coefficients(p)
    if t_end is None:
        rate = abs(c.JPA) if c.JPA != 0 else c.rates["GammaTotal"]
        t_end = 10.0 / rate
    space = FockSpace(cutoffs)
    rho0 = np.zeros((space.dim, space.dim), complex)
    rho0[0, 0] = 1.0
    traj = evolve(ModelTier.EffectivePA, p, rho0, t_end, samples=samples,
                  cutoffs=cutoffs, strict=False)
    duan = np.array([duan_value(covariance(r, space)) for r in traj.states])
    top = np.array([max(top_level_population(r, space)) for r in traj.states])
    bad = np.nonzero(top > TRUNCATION_LIMIT)[0]
    n = bad[0] if len(bad) else len(top)
    m = float(duan[:n].min()) if n else float("nan")
    return XiReport(c.xiPA, c.JPA, traj.times, duan, m, bool(m < threshold),
                    traj.diagnostics.valid, float(traj.times[n - 1]) if n else 0.0)


__all__ = [
    "CollectiveMoments", "CovarianceMatrix", "GridError", "WignerGrid", "XiReport",
    "collective_mode_moments", "collective_operator", "covariance", "duan_value",
    "expect", "fidelity", "half_max_width", "occupations", "quadratures",
    "wigner", "xi_trajectory_check",
]
