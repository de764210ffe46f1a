"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import sys
import timeit

import numpy as np

from mvrec import kernels
from mvrec.eals import InteractionMatrix


def conv_cases(rng, batch):
    # session volume as built by the default session grid: [B, C, T, x, y]
    x = rng.normal(size=(batch, 4, 8, 8, 8))
    k, s = (2, 3, 3), (1, 1, 1)
    cols_shape = kernels.implementations()["python"].im2col3d(x, *k, *s).shape
    cols = rng.normal(size=cols_shape)
    return {
        "im2col3d": lambda m: m.im2col3d(x, *k, *s),
        "col2im3d": lambda m: m.col2im3d(cols, 4, 8, 8, 8, *k, *s),
    }


def pool_cases(rng, batch):
    x = rng.normal(size=(batch, 8, 8, 8, 8))
    win = (2, 2, 2)
    _, arg = kernels.implementations()["python"].maxpool3d_forward(x, *win, *win)
    g = rng.normal(size=arg.shape)
    return {
        "maxpool3d_forward": lambda m: m.maxpool3d_forward(x, *win, *win),
        "maxpool3d_backward": lambda m: m.maxpool3d_backward(g, arg, 8, 8, 8),
    }


def eals_case(rng, n_users, n_items, k):
    dense = rng.random((n_users, n_items)) < 0.05
    R = InteractionMatrix(n_users, n_items, *np.nonzero(dense))
    indptr = np.zeros(n_users + 1, dtype=np.int64)
    np.cumsum(np.bincount(R.users, minlength=n_users), out=indptr[1:])
    pos = np.arange(R.nnz, dtype=np.int64)
    P0 = rng.uniform(-0.01, 0.01, size=(n_users, k))
    Q = rng.uniform(-0.01, 0.01, size=(n_items, k))
    pred0 = np.einsum("ij,ij->i", P0[R.users], Q[R.items])

    def run(m):
        P, pred = P0.copy(), pred0.copy()
        m.eals_update(P, Q, indptr, R.items, pos, pred, 1.0, 0.01, 0.1)
    return {"eals_update": run}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10, help="timed calls per kernel (best is reported)")
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--items", type=int, default=500)
    ap.add_argument("--k", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is timed", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    cases = {**conv_cases(rng, args.batch), **pool_cases(rng, args.batch),
             **eals_case(rng, args.users, args.items, args.k)}

    names = list(impls)
    print("| kernel | " + " | ".join(f"{n} (ms)" for n in names) + " | speedup |")
    print("|---|" + "---|" * (len(names) + 1))
    for label, fn in cases.items():
        best = {n: min(timeit.repeat(lambda: fn(impls[n]), number=1, repeat=args.repeat)) * 1e3 for n in names}
        speed = f"{best['python'] / best['cython']:.2f}x" if "cython" in best else "n/a"
        print(f"| {label} | " + " | ".join(f"{best[n]:.3f}" for n in names) + f" | {speed} |")
    return 0


if __name__ == "__main__":
    sys.exit(main())
