"""Compare the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 3]

Both backends run on the same inputs; outputs are checked for equality
before any timing is reported.
"""
import argparse
import time

import numpy as np

from granogen.kernels import _pure

try:
    from granogen.kernels import _core
except ImportError:
    _core = None


def _edt(mod, sites):
    f = np.where(sites, 0.0, np.inf)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        lines = moved.reshape(-1, moved.shape[-1])
        mod.edt_sq_lines(lines)
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


def _flood(mod, prio, seeds, fg):
    labels = seeds.reshape(-1).copy()
    mod.flood(prio.reshape(-1), labels, fg.reshape(-1), fg.shape)
    return labels


def _best(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _core is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(args.seed)
    n = args.size
    fg = rng.random((n, n, n)) < 0.6
    sites = ~fg
    dist = np.sqrt(_edt(_core, sites))
    prio = np.ascontiguousarray(-dist)
    seeds = np.zeros(fg.shape, np.int32)
    pts = np.argwhere(fg)[rng.choice(int(fg.sum()), 64, replace=False)]
    seeds[tuple(pts.T)] = np.arange(1, 65, dtype=np.int32)
    fg8 = fg.astype(np.uint8)

    rows = []
    for name, fn in (("edt", lambda m: _edt(m, sites)), ("flood", lambda m: _flood(m, prio, seeds, fg8))):
        tc, oc = _best(lambda: fn(_core), args.repeat)
        tp, op = _best(lambda: fn(_pure), max(1, args.repeat // 3))
        if not np.array_equal(oc, op):
            raise SystemExit(f"{name}: backends disagree")
        rows.append((name, tc, tp))
    print(f"kernel  size  compiled_s  python_s  speedup   ({n}^3 voxels)")
    for name, tc, tp in rows:
        print(f"{name:6s}  {n:4d}  {tc:10.4f}  {tp:8.3f}  {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
