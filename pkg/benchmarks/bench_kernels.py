"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--quick]

Both variants are imported side by side from ``mahafsl.kernels`` so one
process compares them; ``FSL_DISABLE_NUMBA`` only changes which one the
public wrappers dispatch to. Numba variants are called once before timing so
compilation is excluded.
"""
import argparse
import timeit

import numpy as np

from mahafsl import _accel, kernels


def spd(rng, d):
    g = rng.standard_normal((d, d))
    return g.T @ g + d * np.eye(d)


def cases(rng, quick):
    d = 16 if quick else 64
    a = spd(rng, d)
    L = np.linalg.cholesky(a)
    rhs = rng.standard_normal((d, 75))
    batch, chans, side = (4, 8, 21) if quick else (25, 32, 42)
    x = rng.standard_normal((batch, chans, side, side))
    w = rng.standard_normal((chans, chans, 3, 3)) * 0.1
    b = rng.standard_normal(chans)
    g = rng.standard_normal((batch, chans, side, side))
    pooled, arg = kernels._maxpool_np(x)
    gp = rng.standard_normal(pooled.shape)
    H, W = x.shape[2:]
    return [
        (f"cholesky d={d}", kernels._cholesky_nb, kernels._cholesky_np, (a,)),
        (f"cho_solve d={d} k=75", kernels._cho_solve_nb, kernels._cho_solve_np, (L, rhs)),
        (f"conv2d {x.shape}", kernels._conv2d_nb, kernels._conv2d_np, (x, w, b, 1)),
        (f"conv2d_backward {x.shape}", kernels._conv2d_backward_nb, kernels._conv2d_backward_np, (x, w, g, 1)),
        (f"maxpool {x.shape}", kernels._maxpool_nb, kernels._maxpool_np, (x,)),
        (f"maxpool_backward {x.shape}", kernels._maxpool_backward_nb, kernels._maxpool_backward_np, (gp, arg, H, W)),
    ]


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--quick", action="store_true", help="small shapes, for smoke runs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    print(f"public wrappers dispatch to: {_accel.backend_name()}")
    print(f"{'kernel':42s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, nb, npy, call_args in cases(rng, args.quick):
        nb(*call_args)  # compile
        t_nb = best_of(nb, call_args, args.repeat)
        t_np = best_of(npy, call_args, args.repeat)
        print(f"{name:42s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
