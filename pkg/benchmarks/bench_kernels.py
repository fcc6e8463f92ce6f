"""Time the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
The numba column disappears when numba is unavailable or DEEPSEEK_NUMBA=0.
"""

import time

import numpy as np

from deepseek import kernels


def bench(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def main():
    rng = np.random.default_rng(7)
    rows = []

    mat = rng.normal(size=(20000, 64))
    q = rng.normal(size=64)
    rows.append(("sq_l2_scan (20000x64)",
                 bench(kernels.numpy_sq_l2_scan, mat, q),
                 bench(kernels.sq_l2_scan, mat, q)))

    steps, e, h = 40, 64, 128
    xs = rng.normal(size=(steps, e))
    h0 = np.zeros(h)
    c0 = np.zeros(h)
    w_g = rng.normal(size=(4 * h, e + h)) * 0.1
    b_g = np.zeros(4 * h)
    rows.append((f"lstm_seq_forward (T={steps}, e={e}, h={h})",
                 bench(kernels.numpy_lstm_seq_forward, xs, h0, c0, w_g, b_g),
                 bench(kernels.lstm_seq_forward, xs, h0, c0, w_g, b_g)))

    hs, cs, gates = kernels.numpy_lstm_seq_forward(xs, h0, c0, w_g, b_g)
    dhs = rng.normal(size=(steps, h))
    rows.append((f"lstm_seq_backward (T={steps}, e={e}, h={h})",
                 bench(kernels.numpy_lstm_seq_backward, xs, h0, c0, hs, cs, gates, w_g, dhs),
                 bench(kernels.lstm_seq_backward, xs, h0, c0, hs, cs, gates, w_g, dhs)))

    active = kernels.backend()
    print(f"active backend: {active}")
    print(f"{'kernel':<42} {'numpy ms':>10} {'active ms':>10} {'speedup':>8}")
    for name, numpy_ms, active_ms in rows:
        speedup = numpy_ms / active_ms if active_ms > 0 else float("inf")
        print(f"{name:<42} {numpy_ms:>10.3f} {active_ms:>10.3f} {speedup:>7.2f}x")


if __name__ == "__main__":
    main()
