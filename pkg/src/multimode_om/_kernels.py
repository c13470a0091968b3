"""Hot loops: master-equation stepping and displaced-parity Wigner grids.

Two interchangeable backends.  ``numba`` walks CSR ladder-operator products
inside compiled loops; ``numpy`` uses dense batched matmuls.  The backend is
read from ``MMOM_BACKEND`` (``numba`` | ``numpy``) at import and can be
switched at run time with :func:`set_backend`.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

STATUS_OK = 0
STATUS_DT_UNDERFLOW = 1

_backend = os.environ.get("MMOM_BACKEND", "numba" if HAVE_NUMBA else "numpy").lower()
if _backend not in ("numba", "numpy"):
    raise ImportError(f"MMOM_BACKEND must be 'numba' or 'numpy', got {_backend!r}")
if _backend == "numba" and not HAVE_NUMBA:  # pragma: no cover
    _backend = "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


# ---------------------------------------------------------------------------
# packed generator

class PackedGenerator:
    """Flat arrays describing ``drho/dt = sum_j c_j(t) L_j rho R_j``.

    ``left``/``right`` index into ``ops`` (-1 means identity) and
    ``c_j(t) = sum amps[s] exp(i freqs[s] t)`` over ``s`` in
    ``coef_off[j]:coef_off[j+1]``.
    """

    def __init__(self, ops, left, right, coef_off, freqs, amps):
        self.dim = ops[0].shape[0] if len(ops) else 0
        self.ops = np.asarray(ops, dtype=complex).reshape(len(ops), self.dim, self.dim)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.coef_off = np.asarray(coef_off, dtype=np.int64)
        self.freqs = np.asarray(freqs, dtype=float)
        self.amps = np.asarray(amps, dtype=complex)
        # CSR copies for the compiled path
        indptr = np.zeros((len(ops), self.dim + 1), dtype=np.int64)
        base = np.zeros(len(ops) + 1, dtype=np.int64)
        idx, dat = [], []
        for o, A in enumerate(self.ops):
            nz_r, nz_c = np.nonzero(A)
            counts = np.bincount(nz_r, minlength=self.dim)
            indptr[o, 1:] = np.cumsum(counts)
            idx.append(nz_c.astype(np.int64))
            dat.append(A[nz_r, nz_c])
            base[o + 1] = base[o] + len(nz_c)
        self.indptr = indptr
        self.base = base
        self.indices = np.concatenate(idx) if idx else np.zeros(0, np.int64)
        self.data = np.concatenate(dat) if dat else np.zeros(0, complex)
        self._dense_cache = None

    @property
    def nterms(self) -> int:
        return len(self.left)

    def max_frequency(self) -> float:
        return float(np.max(np.abs(self.freqs))) if len(self.freqs) else 0.0

    def norm_bound(self) -> float:
        """Crude bound on the superoperator norm (spectral norms times amplitudes)."""
        norms = np.array([np.linalg.norm(A, 2) for A in self.ops]) if len(self.ops) else np.zeros(0)
        tot = 0.0
        for j in range(self.nterms):
            a = np.abs(self.amps[self.coef_off[j]:self.coef_off[j + 1]]).sum()
            nl = 1.0 if self.left[j] < 0 else norms[self.left[j]]
            nr = 1.0 if self.right[j] < 0 else norms[self.right[j]]
            tot += a * nl * nr
        return float(tot)

    def coefficients(self, t: float) -> np.ndarray:
        ph = self.amps * np.exp(1j * self.freqs * t)
        return np.add.reduceat(ph, self.coef_off[:-1]) if len(ph) else np.zeros(0, complex)

    def _dense(self):
        if self._dense_cache is None:
            eye = np.eye(self.dim, dtype=complex)
            lm = self.left < 0
            rm = self.right < 0
            kinds = {
                "left": np.nonzero(~lm & rm)[0],
                "right": np.nonzero(lm & ~rm)[0],
                "both": np.nonzero(~lm & ~rm)[0],
                "none": np.nonzero(lm & rm)[0],
            }
            L = {k: self.ops[self.left[v]] for k, v in kinds.items() if k in ("left", "both")}
            R = {k: self.ops[self.right[v]] for k, v in kinds.items() if k in ("right", "both")}
            self._dense_cache = (kinds, L, R, eye)
        return self._dense_cache


# ---------------------------------------------------------------------------
# numba kernels

@njit(cache=True)
def _csr_left(indptr, indices, data, base, X, coef, out):
    d = X.shape[0]
    for i in range(d):
        for k in range(indptr[i], indptr[i + 1]):
            v = coef * data[base + k]
            j = indices[base + k]
            for c in range(d):
                out[i, c] += v * X[j, c]


@njit(cache=True)
def _csr_right(indptr, indices, data, base, X, coef, out):
    d = X.shape[0]
    for k in range(d):
        for e in range(indptr[k], indptr[k + 1]):
            v = coef * data[base + e]
            j = indices[base + e]
            for i in range(d):
                out[i, j] += v * X[i, k]


@njit(cache=True)
def _rhs_nb(t, X, out, tmp, left, right, coef_off, freqs, amps,
            indptr, indices, data, base):
    d = X.shape[0]
    for i in range(d):
        for c in range(d):
            out[i, c] = 0.0
    for j in range(left.shape[0]):
        cj = 0.0 + 0.0j
        for s in range(coef_off[j], coef_off[j + 1]):
            cj += amps[s] * np.exp(1j * freqs[s] * t)
        if cj == 0.0:
            continue
        lo = left[j]
        ro = right[j]
        if lo < 0 and ro < 0:
            for i in range(d):
                for c in range(d):
                    out[i, c] += cj * X[i, c]
        elif ro < 0:
            _csr_left(indptr[lo], indices, data, base[lo], X, cj, out)
        elif lo < 0:
            _csr_right(indptr[ro], indices, data, base[ro], X, cj, out)
        else:
            for i in range(d):
                for c in range(d):
                    tmp[i, c] = 0.0
            _csr_left(indptr[lo], indices, data, base[lo], X, 1.0 + 0.0j, tmp)
            _csr_right(indptr[ro], indices, data, base[ro], tmp, cj, out)


@njit(cache=True)
def _propagate_nb(rho0, t0, sample_times, dt, dt_max, tol, dt_min,
                  left, right, coef_off, freqs, amps, indptr, indices, data, base):
    d = rho0.shape[0]
    ns = sample_times.shape[0]
    states = np.empty((ns, d, d), dtype=np.complex128)
    herm = np.zeros(ns)
    y = rho0.copy()
    t = t0
    k1 = np.empty_like(y)
    k2 = np.empty_like(y)
    k3 = np.empty_like(y)
    k4 = np.empty_like(y)
    tmp = np.empty_like(y)
    stage = np.empty_like(y)
    full = np.empty_like(y)
    half = np.empty_like(y)
    f0 = np.empty_like(y)
    nsteps = 0
    nrej = 0
    status = 0
    max_herm = 0.0
    for si in range(ns):
        target = sample_times[si]
        while t < target and status == 0:
            h = min(dt, target - t)
            _rhs_nb(t, y, f0, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
            # one full step
            for a in range(2):
                hh = h if a == 0 else 0.5 * h
                for i in range(d):
                    for c in range(d):
                        stage[i, c] = y[i, c] + 0.5 * hh * f0[i, c]
                _rhs_nb(t + 0.5 * hh, stage, k2, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
                for i in range(d):
                    for c in range(d):
                        stage[i, c] = y[i, c] + 0.5 * hh * k2[i, c]
                _rhs_nb(t + 0.5 * hh, stage, k3, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
                for i in range(d):
                    for c in range(d):
                        stage[i, c] = y[i, c] + hh * k3[i, c]
                _rhs_nb(t + hh, stage, k4, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
                dst = full if a == 0 else half
                for i in range(d):
                    for c in range(d):
                        dst[i, c] = y[i, c] + hh / 6.0 * (f0[i, c] + 2.0 * k2[i, c] + 2.0 * k3[i, c] + k4[i, c])
            # second half step from the midpoint
            th = t + 0.5 * h
            hh = 0.5 * h
            _rhs_nb(th, half, k1, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
            for i in range(d):
                for c in range(d):
                    stage[i, c] = half[i, c] + 0.5 * hh * k1[i, c]
            _rhs_nb(th + 0.5 * hh, stage, k2, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
            for i in range(d):
                for c in range(d):
                    stage[i, c] = half[i, c] + 0.5 * hh * k2[i, c]
            _rhs_nb(th + 0.5 * hh, stage, k3, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
            for i in range(d):
                for c in range(d):
                    stage[i, c] = half[i, c] + hh * k3[i, c]
            _rhs_nb(th + hh, stage, k4, tmp, left, right, coef_off, freqs, amps, indptr, indices, data, base)
            err = 0.0
            for i in range(d):
                for c in range(d):
                    half[i, c] = half[i, c] + hh / 6.0 * (k1[i, c] + 2.0 * k2[i, c] + 2.0 * k3[i, c] + k4[i, c])
                    e = abs(half[i, c] - full[i, c])
                    if e > err:
                        err = e
            err /= 15.0
            if err > tol:
                nrej += 1
                dt = 0.5 * h
                if dt < dt_min:
                    status = 1
                continue
            hd = 0.0
            for i in range(d):
                for c in range(i, d):
                    e = abs(half[i, c] - np.conj(half[c, i]))
                    if e > hd:
                        hd = e
                    s = 0.5 * (half[i, c] + np.conj(half[c, i]))
                    y[i, c] = s
                    y[c, i] = np.conj(s)
            if hd > max_herm:
                max_herm = hd
            t = t + h if h < target - t else target
            nsteps += 1
            # regrow only after a comfortably accurate full-length step
            if err < tol / 64.0 and h == dt and dt < dt_max:
                dt = min(2.0 * dt, dt_max)
        states[si] = y
        herm[si] = max_herm
        if status != 0:
            for sj in range(si + 1, ns):
                states[sj] = y
                herm[sj] = max_herm
            break
    return states, herm, nsteps, nrej, dt, status


# ---------------------------------------------------------------------------
# numpy fallback

def _rhs_np(gen: PackedGenerator, t, X):
    kinds, L, R, _ = gen._dense()
    c = gen.coefficients(t)
    out = np.zeros_like(X)
    if len(kinds["none"]):
        out += c[kinds["none"]].sum() * X
    if len(kinds["left"]):
        out += np.tensordot(c[kinds["left"]], L["left"], 1) @ X
    if len(kinds["right"]):
        out += X @ np.tensordot(c[kinds["right"]], R["right"], 1)
    if len(kinds["both"]):
        out += np.tensordot(c[kinds["both"]], L["both"] @ X @ R["both"], 1)
    return out


def _propagate_np(gen, rho0, t0, sample_times, dt, dt_max, tol, dt_min):
    y = rho0.copy()
    t = t0
    ns = len(sample_times)
    states = np.empty((ns,) + y.shape, dtype=complex)
    herm = np.zeros(ns)
    nsteps = nrej = status = 0
    max_herm = 0.0

    def rk4(t, y, h, k1):
        k2 = _rhs_np(gen, t + 0.5 * h, y + 0.5 * h * k1)
        k3 = _rhs_np(gen, t + 0.5 * h, y + 0.5 * h * k2)
        k4 = _rhs_np(gen, t + h, y + h * k3)
        return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    for si, target in enumerate(sample_times):
        while t < target and status == 0:
            h = min(dt, target - t)
            f0 = _rhs_np(gen, t, y)
            full = rk4(t, y, h, f0)
            half = rk4(t, y, 0.5 * h, f0)
            half = rk4(t + 0.5 * h, half, 0.5 * h, _rhs_np(gen, t + 0.5 * h, half))
            err = np.max(np.abs(half - full)) / 15.0
            if err > tol:
                nrej += 1
                dt = 0.5 * h
                if dt < dt_min:
                    status = STATUS_DT_UNDERFLOW
                continue
            max_herm = max(max_herm, float(np.max(np.abs(half - half.conj().T))))
            y = 0.5 * (half + half.conj().T)
            t = t + h if h < target - t else target
            nsteps += 1
            if err < tol / 64.0 and h == dt and dt < dt_max:
                dt = min(2.0 * dt, dt_max)
        states[si:] = y
        herm[si:] = max_herm
        if status:
            break
    return states, herm, nsteps, nrej, dt, status


# ---------------------------------------------------------------------------
# public entry points

def rhs(gen: PackedGenerator, t: float, rho: np.ndarray) -> np.ndarray:
    rho = np.ascontiguousarray(rho, dtype=complex)
    if _backend == "numpy":
        return _rhs_np(gen, t, rho)
    out = np.empty_like(rho)
    tmp = np.empty_like(rho)
    _rhs_nb(float(t), rho, out, tmp, gen.left, gen.right, gen.coef_off, gen.freqs,
            gen.amps, gen.indptr, gen.indices, gen.data, gen.base)
    return out


def propagate(gen: PackedGenerator, rho0, t0, sample_times, dt, dt_max=None,
              tol=1e-9, dt_min=None):
    """Step ``rho0`` through ``sample_times`` with RK4 step doubling.

    Returns ``(states, herm_defects, nsteps, nrejects, final_dt, status)``.
    """
    rho0 = np.ascontiguousarray(rho0, dtype=complex)
    ts = np.ascontiguousarray(sample_times, dtype=float)
    dt_max = float(dt if dt_max is None else dt_max)
    if dt_min is None:
        dt_min = 1e-14 * max(1.0, abs(float(ts[-1])) if len(ts) else 1.0)
    if _backend == "numpy":
        return _propagate_np(gen, rho0, float(t0), ts, float(dt), dt_max, float(tol), float(dt_min))
    return _propagate_nb(rho0, float(t0), ts, float(dt), dt_max, float(tol), float(dt_min),
                         gen.left, gen.right, gen.coef_off, gen.freqs, gen.amps,
                         gen.indptr, gen.indices, gen.data, gen.base)


# ---------------------------------------------------------------------------
# Wigner function by displaced parity

def wigner_padding(n: int, amax: float) -> int:
    """Levels needed so that <k|D(alpha)|m> is negligible beyond the pad."""
    return int(np.ceil((np.sqrt(n) + amax + 7.0) ** 2))


@njit(cache=True)
def _wigner_nb(rho, xs, ps, npad):
    n = rho.shape[0]
    nx = xs.shape[0]
    npp = ps.shape[0]
    W = np.empty((nx, npp))
    D = np.empty((n, npad), dtype=np.complex128)
    sq = np.sqrt(np.arange(npad + 1.0))
    for ix in range(nx):
        for ip in range(npp):
            al = xs[ix] + 1j * ps[ip]
            alc = np.conj(al)
            # first column <k|D|0>
            D[0, 0] = np.exp(-0.5 * (al.real ** 2 + al.imag ** 2))
            for k in range(1, n):
                D[k, 0] = D[k - 1, 0] * al / sq[k]
            for m in range(npad - 1):
                D[0, m + 1] = -alc * D[0, m] / sq[m + 1]
                for k in range(1, n):
                    D[k, m + 1] = (sq[k] * D[k - 1, m] - alc * D[k, m]) / sq[m + 1]
            acc = 0.0
            for m in range(npad):
                s = 0.0 + 0.0j
                for j in range(n):
                    rj = 0.0 + 0.0j
                    for k in range(n):
                        rj += rho[j, k] * D[k, m]
                    s += np.conj(D[j, m]) * rj
                acc += s.real if m % 2 == 0 else -s.real
            W[ix, ip] = 2.0 / np.pi * acc
    return W


def _displacement_block_np(alphas, n, npad):
    """``<k|D(alpha)|m>`` for k < n, m < npad, batched over ``alphas``."""
    a = alphas[:, None]
    sq = np.sqrt(np.arange(npad + 1.0))
    D = np.empty((len(alphas), n, npad), dtype=complex)
    col = np.empty((len(alphas), n), dtype=complex)
    col[:, 0] = np.exp(-0.5 * np.abs(alphas) ** 2)
    for k in range(1, n):
        col[:, k] = col[:, k - 1] * alphas / sq[k]
    D[:, :, 0] = col
    ac = np.conj(a)
    for m in range(npad - 1):
        prev = D[:, :, m]
        nxt = -ac * prev
        nxt[:, 1:] += sq[1:n] * prev[:, :-1]
        D[:, :, m + 1] = nxt / sq[m + 1]
    return D


def _wigner_np(rho, xs, ps, npad, chunk=256):
    X, P = np.meshgrid(xs, ps, indexing="ij")
    al = (X + 1j * P).ravel()
    out = np.empty(al.shape)
    sign = (-1.0) ** np.arange(npad)
    n = rho.shape[0]
    for s in range(0, len(al), chunk):
        D = _displacement_block_np(al[s:s + chunk], n, npad)
        rD = np.einsum("jk,bkm->bjm", rho, D)
        diag = np.einsum("bjm,bjm->bm", D.conj(), rD).real
        out[s:s + chunk] = 2.0 / np.pi * diag @ sign
    return out.reshape(X.shape)


def wigner_grid(rho, xs, ps, npad=None) -> np.ndarray:
    rho = np.ascontiguousarray(rho, dtype=complex)
    xs = np.ascontiguousarray(xs, dtype=float)
    ps = np.ascontiguousarray(ps, dtype=float)
    if npad is None:
        amax = float(np.sqrt(np.max(xs ** 2) + np.max(ps ** 2)))
        npad = wigner_padding(rho.shape[0], amax)
    if _backend == "numpy":
        return _wigner_np(rho, xs, ps, npad)
    return _wigner_nb(rho, xs, ps, int(npad))
