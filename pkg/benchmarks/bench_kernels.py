"""Compare the compiled causal-convolution kernels against the pure-numpy
fallback.

Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from relgraph.kernels import BACKEND, pure

try:
    from relgraph.kernels import _fast as fast
except ImportError:
    fast = None


def bench(fn, *args, repeat=20):
    fn(*args)                                   # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    print(f"selected backend: {BACKEND}")
    if fast is None:
        print("compiled extension not available; nothing to compare")
        return
    rng = np.random.default_rng(0)
    for B, T, d, kw in [(8, 32, 64, 3), (8, 128, 128, 3), (32, 64, 128, 5)]:
        x = rng.normal(size=(B, T, d))
        w = rng.normal(size=(kw, d, d))
        b = rng.normal(size=d)
        g = rng.normal(size=(B, T, d))
        tp = bench(pure.conv1d_forward, x, w, b, "forward")
        tf = bench(fast.conv1d_forward, x, w, b, "forward")
        bp = bench(pure.conv1d_backward, x, w, g, "forward")
        bf = bench(fast.conv1d_backward, x, w, g, "forward")
        np.testing.assert_allclose(pure.conv1d_forward(x, w, b, "forward"),
                                   fast.conv1d_forward(x, w, b, "forward"),
                                   rtol=1e-12, atol=1e-12)
        print(f"B={B:3d} T={T:4d} d={d:4d} kw={kw}  "
              f"fwd pure {tp * 1e3:7.2f} ms / fast {tf * 1e3:7.2f} ms "
              f"({tp / tf:4.1f}x)   "
              f"bwd pure {bp * 1e3:7.2f} ms / fast {bf * 1e3:7.2f} ms "
              f"({bp / bf:4.1f}x)")


if __name__ == "__main__":
    main()
