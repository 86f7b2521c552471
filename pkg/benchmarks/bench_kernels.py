"""Time the compiled-loop and numpy flavours of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat N]

The loop flavours run under numba when it is installed (first call compiles
and is excluded from timing); both flavours are checked to agree first.
"""
import argparse
import timeit

import numpy as np

from weseg import kernels
from weseg._accel import HAVE_NUMBA


def cases(rng):
    tile = rng.integers(0, 256, size=(512, 512, 3), dtype=np.uint8)
    grid_xs, grid_ys = np.meshgrid(np.arange(0, 1537, 384), np.arange(0, 1537, 384))
    xs, ys = grid_xs.ravel(), grid_ys.ravel()
    scores = rng.random(xs.size)
    n = 200_000
    s = np.sort(rng.integers(0, 1000, n).astype(np.float64))
    y = rng.integers(0, 2, n).astype(np.int64)
    return {
        "channel_tally 512x512": ((tile, 8), kernels.channel_tally_numpy, kernels.channel_tally_loop),
        "stitch_accumulate 2048^2": ((xs, ys, scores, 512, 2048, 2048),
                                     kernels.stitch_accumulate_numpy, kernels.stitch_accumulate_loop),
        "positive_rank_sum 2e5": ((s, y), kernels.positive_rank_sum_numpy, kernels.positive_rank_sum_loop),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'kernel':<28}{'numpy ms':>12}{'loop ms':>12}{'speedup':>10}")
    for name, (inputs, fn_np, fn_loop) in cases(np.random.default_rng(0)).items():
        if not same(fn_np(*inputs), fn_loop(*inputs)):  # also triggers compilation
            raise SystemExit(f"{name}: flavours disagree")
        t_np = min(timeit.repeat(lambda: fn_np(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_loop = min(timeit.repeat(lambda: fn_loop(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{t_np:>12.2f}{t_loop:>12.2f}{t_np / t_loop:>9.1f}x")


if __name__ == "__main__":
    main()
