"""Times the numba kernels against the numpy fallback.

    python benchmarks/bench_backends.py [--cutoffs 4 6 8] [--repeat 3]

Each case is run once to warm up (numba compiles on first call), then timed
``--repeat`` times; the best time is reported.
"""
import argparse
import time

import numpy as np

from multimode_om import _kernels
from multimode_om.coeffs import resonant_params
from multimode_om.dynamics import build_generator
from multimode_om.fock import FockSpace, coherent_single, product_state, random_density_matrix
from multimode_om.model import from_scales


def best_of(fn, repeat):
    fn()
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return min(ts)


def cases(cutoffs):
    p = resonant_params(from_scales(DeltaBar=1.5, G1=0.05, G2=0.05), "BS", 1.5)
    for n in cutoffs:
        gen = build_generator("reduced", p, (n, n)).pack()
        rho = random_density_matrix(n * n, rng=0)
        yield f"rhs reduced {n}x{n} (x200)", lambda g=gen, r=rho: [_kernels.rhs(g, 0.3 * k, r) for k in range(200)]
        ts = np.linspace(0, 20.0, 5)
        yield f"propagate reduced {n}x{n}", lambda g=gen, r=rho, ts=ts: _kernels.propagate(g, r, 0.0, ts, 0.05)
    rho = product_state(coherent_single(20, 1.0 + 0.5j))
    xs = np.linspace(-3, 3, 121)
    yield "wigner 20 levels 121x121", lambda: _kernels.wigner_grid(rho, xs, xs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cutoffs", type=int, nargs="+", default=[4, 6, 8])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    for name, fn in cases(args.cutoffs):
        t = {}
        for be in ("numba", "numpy"):
            _kernels.set_backend(be)
            t[be] = best_of(fn, args.repeat)
        rows.append((name, t["numba"], t["numpy"]))
    _kernels.set_backend("numba")

    w = max(len(r[0]) for r in rows)
    print(f"{'case':<{w}}  {'numba [s]':>10}  {'numpy [s]':>10}  {'speedup':>8}")
    for name, a, b in rows:
        print(f"{name:<{w}}  {a:10.4f}  {b:10.4f}  {b / a:8.1f}")


if __name__ == "__main__":
    main()
