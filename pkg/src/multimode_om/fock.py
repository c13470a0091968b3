"""Dense operator algebra on truncated tensor-product Fock spaces.

Mode order is global: cavity first when present, then mechanics 1 and 2.
Operators and density matrices are plain complex ``ndarray``s; a
:class:`FockSpace` carries the layout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy.linalg import expm

HERM_TOL = 1e-10
TRACE_TOL = 1e-8
POS_TOL = 1e-8
TRUNCATION_LIMIT = 1e-3


@dataclass(frozen=True)
class FockSpace:
    cutoffs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "cutoffs", tuple(int(c) for c in self.cutoffs))
        if not self.cutoffs or min(self.cutoffs) < 2:
            raise ValueError("every mode needs a cutoff of at least 2")

    @property
    def dim(self) -> int:
        return int(np.prod(self.cutoffs))

    @property
    def nmodes(self) -> int:
        return len(self.cutoffs)

    def identity(self) -> np.ndarray:
        return np.eye(self.dim, dtype=complex)


def _embed(space: FockSpace, mode: int, op: np.ndarray) -> np.ndarray:
    mats = [np.eye(c, dtype=complex) for c in space.cutoffs]
    mats[mode] = op
    return reduce(np.kron, mats)


def ladder(space: FockSpace, mode: int, kind="lower") -> np.ndarray:
    if not 0 <= mode < space.nmodes:
        raise IndexError(f"mode {mode} out of range for {space.nmodes} modes")
    n = space.cutoffs[mode]
    a = np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)
    if kind == "raise":
        a = a.T.copy()
    elif kind != "lower":
        raise ValueError(f"kind must be 'lower' or 'raise', got {kind!r}")
    return _embed(space, mode, a)


def number(space: FockSpace, mode: int) -> np.ndarray:
    n = space.cutoffs[mode]
    return _embed(space, mode, np.diag(np.arange(n, dtype=float)).astype(complex))


def ladder_vector(space: FockSpace, modes=None) -> list[np.ndarray]:
    """``(b1, b2, b1^dag, b2^dag)`` for the two mechanical modes of ``space``."""
    if modes is None:
        modes = (space.nmodes - 2, space.nmodes - 1)
    low = [ladder(space, m) for m in modes]
    return low + [b.conj().T for b in low]


# ---------------------------------------------------------------------------
# states

def fock_state(space: FockSpace, occupations) -> np.ndarray:
    idx = np.ravel_multi_index(tuple(occupations), space.cutoffs)
    rho = np.zeros((space.dim, space.dim), dtype=complex)
    rho[idx, idx] = 1.0
    return rho


def vacuum(space: FockSpace) -> np.ndarray:
    return fock_state(space, [0] * space.nmodes)


def thermal_single(n: int, nbar: float) -> np.ndarray:
    """Geometric distribution truncated at ``n`` levels and renormalised."""
    if nbar == 0:
        w = np.zeros(n)
        w[0] = 1.0
    else:
        x = nbar / (1.0 + nbar)
        w = x ** np.arange(n)
        w /= w.sum()
    return np.diag(w).astype(complex)


def thermal(space: FockSpace, nbars) -> np.ndarray:
    return reduce(np.kron, [thermal_single(c, nb) for c, nb in zip(space.cutoffs, nbars)])


def coherent_single(n: int, alpha: complex, pad=40) -> np.ndarray:
    """Coherent state projected on ``n`` levels (computed in a padded space)."""
    N = max(n + pad, n)
    a = np.diag(np.sqrt(np.arange(1, N)), 1)
    vec = expm(alpha * a.T - np.conj(alpha) * a)[:, 0][:n]
    vec /= np.linalg.norm(vec)
    return np.outer(vec, vec.conj())


def product_state(*rhos) -> np.ndarray:
    return reduce(np.kron, rhos)


def random_density_matrix(dim: int, rank=None, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    rank = dim if rank is None else rank
    z = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = z @ z.conj().T
    return rho / np.trace(rho).real


# ---------------------------------------------------------------------------
# superoperators

def lindblad_apply(c: np.ndarray, rho: np.ndarray) -> np.ndarray:
    if c.shape != rho.shape:
        raise ValueError(f"shape mismatch {c.shape} vs {rho.shape}")
    cd = c.conj().T
    cdc = cd @ c
    return c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)


def bilinear_dissipator(M, bvec, rho) -> np.ndarray:
    """sum_mn [M1]_mn b_m b_n rho + [M2]_mn rho b_m b_n + [M3]_mn b_m rho b_n."""
    if len(bvec) != 4 or any(b.shape != rho.shape for b in bvec):
        raise ValueError("bvec must hold four operators shaped like rho")
    M1, M2, M3 = M.M1, M.M2, M.M3
    left = np.zeros_like(rho)
    right = np.zeros_like(rho)
    out = np.zeros_like(rho)
    for m in range(4):
        for n in range(4):
            bb = bvec[m] @ bvec[n]
            left += M1[m, n] * bb
            right += M2[m, n] * bb
        # sum_n M3[m, n] b_n as the right factor of the sandwich
        r3 = sum(M3[m, n] * bvec[n] for n in range(4))
        out += bvec[m] @ rho @ r3
    return out + left @ rho + rho @ right


# ---------------------------------------------------------------------------
# reductions and basis changes

def partial_trace(rho: np.ndarray, space: FockSpace, keep) -> np.ndarray:
    keep = sorted({int(k) for k in np.atleast_1d(keep)})
    if not keep or keep[0] < 0 or keep[-1] >= space.nmodes:
        raise ValueError(f"bad mode subset {keep}")
    n = space.nmodes
    t = rho.reshape(space.cutoffs * 2)
    drop = [m for m in range(n) if m not in keep]
    # trace out from the highest mode down so axis numbers stay valid
    for m in sorted(drop, reverse=True):
        nm = t.ndim // 2
        t = np.trace(t, axis1=m, axis2=m + nm)
    d = int(np.prod([space.cutoffs[k] for k in keep]))
    return t.reshape(d, d)


def mode_rotate(rho: np.ndarray, space: FockSpace, modes, angle: float) -> np.ndarray:
    """Conjugate by the two-mode rotation exp[angle (b_i^dag b_j - b_i b_j^dag)]."""
    i, j = modes
    if i == j or not (0 <= i < space.nmodes and 0 <= j < space.nmodes):
        raise ValueError(f"need two distinct valid modes, got {modes}")
    bi, bj = ladder(space, i), ladder(space, j)
    gen = bi.conj().T @ bj - bi @ bj.conj().T
    U = expm(angle * gen)
    return U @ rho @ U.conj().T


# ---------------------------------------------------------------------------
# diagnostics

def hermiticity_defect(rho) -> float:
    return float(np.max(np.abs(rho - rho.conj().T)))


def trace_defect(rho) -> float:
    return float(abs(np.trace(rho) - 1.0))


def min_eigenvalue(rho) -> float:
    return float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])


def top_level_population(rho: np.ndarray, space: FockSpace) -> tuple[float, ...]:
    """Population of the highest retained Fock level of each mode."""
    p = np.real(np.diag(rho)).reshape(space.cutoffs)
    out = []
    for m in range(space.nmodes):
        out.append(float(np.take(p, -1, axis=m).sum()))
    return tuple(out)


def check_density_matrix(rho, herm_tol=HERM_TOL, trace_tol=TRACE_TOL, pos_tol=POS_TOL):
    problems = []
    if hermiticity_defect(rho) > herm_tol:
        problems.append("not Hermitian")
    if trace_defect(rho) > trace_tol:
        problems.append("trace != 1")
    if min_eigenvalue(rho) < -pos_tol:
        problems.append("negative eigenvalue")
    if problems:
        raise ValueError("invalid density matrix: " + ", ".join(problems))
    return rho


# ---------------------------------------------------------------------------
# snapshot files: one JSON header line, then one line per row of
# interleaved (re, im) pairs

def write_snapshot(path, rho, space: FockSpace, t: float, frame="rotating"):
    header = {"cutoffs": list(space.cutoffs), "time": float(t), "frame": frame,
              "dim": int(rho.shape[0])}
    pairs = np.empty((rho.shape[0], 2 * rho.shape[1]))
    pairs[:, 0::2] = rho.real
    pairs[:, 1::2] = rho.imag
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        np.savetxt(fh, pairs, fmt="%.17g")


def read_snapshot(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        pairs = np.loadtxt(fh, ndmin=2)
    rho = pairs[:, 0::2] + 1j * pairs[:, 1::2]
    return rho, FockSpace(tuple(header["cutoffs"])), header
