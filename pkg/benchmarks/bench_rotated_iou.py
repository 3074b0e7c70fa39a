"""Compare the compiled and pure-Python rotated-IoU kernels.

    python benchmarks/bench_rotated_iou.py [--boxes 200] [--repeat 5]
"""

import argparse
import time

import numpy as np

from pcdf._ext import geometry_py

try:
    from pcdf._ext import _geometry
except ImportError:
    _geometry = None


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(0, 64, (n, 2)), rng.uniform(2, 20, (n, 2)), rng.uniform(-np.pi, np.pi, n)])


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--boxes", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    A, B = random_boxes(rng, args.boxes), random_boxes(rng, args.boxes)
    pairs = args.boxes**2
    t_py, ref = best_of(lambda: geometry_py.rotated_iou_matrix(A, B), args.repeat)
    print(f"python  {t_py * 1e3:9.2f} ms  {pairs / t_py:12.0f} pairs/s")
    if _geometry is None:
        print("cython  not built (run: pip install --no-build-isolation -e .)")
        return
    t_cy, out = best_of(lambda: _geometry.rotated_iou_matrix(A, B), args.repeat)
    print(f"cython  {t_cy * 1e3:9.2f} ms  {pairs / t_cy:12.0f} pairs/s")
    print(f"speedup {t_py / t_cy:.1f}x; max |diff| {np.abs(out - ref).max():.1e}")


if __name__ == "__main__":
    main()
