"""Compare the compiled and numpy kernel backends on representative shapes.

    python benchmarks/bench_kernels.py [--repeats N]

Prints one tab-separated line per kernel: name, numpy ms, cython ms, speed-up.
"""
from __future__ import annotations

import argparse

import numpy as np

from plainseg._kernels import backend, compiled_available
from plainseg.evaluation import benchmark


def cases(rng):
    x = rng.standard_normal((8, 64, 16, 16)).astype(np.float32)
    cols = rng.standard_normal((8, 64 * 9, 16 * 16)).astype(np.float32)
    shapes = np.array([[16, 16], [8, 8], [4, 4]], dtype=np.int64)
    starts = np.array([0, 256, 320], dtype=np.int64)
    S, B, Q, M, D, L, P = 336, 8, 336, 4, 8, 3, 4
    value = rng.standard_normal((B, S, M, D)).astype(np.float32)
    loc = rng.uniform(0, 1, (B, Q, M, L, P, 2)).astype(np.float32)
    attw = rng.uniform(0, 1, (B, Q, M, L, P)).astype(np.float32)
    g = rng.standard_normal((B, Q, M, D)).astype(np.float32)
    return {
        "im2col 3x3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1),
        "msda forward": lambda k: k.ms_deform_attn_forward(value, shapes, starts, loc, attw),
        "msda backward": lambda k: k.ms_deform_attn_backward(value, shapes, starts, loc, attw, g),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    if not compiled_available():
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    py, cy = backend("numpy"), backend("cython")
    print("kernel\tnumpy_ms\tcython_ms\tspeedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = benchmark(lambda: fn(py), 2, args.repeats)["median_ms"]
        t_cy = benchmark(lambda: fn(cy), 2, args.repeats)["median_ms"]
        print(f"{name}\t{t_py:.3f}\t{t_cy:.3f}\t{t_py / t_cy:.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
