"""Time the compiled kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--steps 100000] [--repeat 5]

Set SAFESWITCH_DISABLE_NUMBA=1 to see both columns run the numpy code.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from safeswitch import kernels


def cases(steps: int):
    rng = np.random.default_rng(0)
    A = np.array([[0.9, 0.2], [-0.1, 0.8]])
    B = np.array([[0.0], [1.0]])
    K = np.array([[-0.1, -0.3]])
    noise, explore = rng.standard_normal((steps, 2)), rng.standard_normal((steps, 1))
    Q, R = np.eye(2), np.eye(1)
    L = A + B @ K
    A3 = np.array([[1.0, 0.3, 0.0], [0.0, 0.95, 0.2], [0.1, 0.0, 0.9]])
    B3 = np.array([[0.0], [0.0], [1.0]])
    return {
        f"rollout ({steps} steps)": (
            lambda: kernels.rollout(A, B, K, np.ones(2), noise, explore, Q, R, 1e12),
            lambda: kernels.rollout_py(A, B, K, np.ones(2), noise, explore, Q, R, 1e12)),
        f"rollout scalar ({steps})": (
            lambda: kernels.rollout(A[:1, :1], B[1:, :], K[:, :1], np.ones(1), noise[:, :1], explore, Q[:1, :1], R, 1e12),
            lambda: kernels.rollout_py(A[:1, :1], B[1:, :], K[:, :1], np.ones(1), noise[:, :1], explore, Q[:1, :1], R,
                                       1e12)),
        "riccati (3x3)": (
            lambda: kernels.riccati_iterate(A3, B3, np.eye(3), R, 1e-12, 100000, 1e12),
            lambda: kernels.riccati_iterate_py(A3, B3, np.eye(3), R, 1e-12, 100000, 1e12)),
        "lyapunov (2x2)": (
            lambda: kernels.lyapunov_iterate(L, Q, 1e-13, 100000, 1e12),
            lambda: kernels.lyapunov_iterate_py(L, Q, 1e-13, 100000, 1e12)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"backend: {kernels.backend()}")
    print(f"{'kernel':<24} {'compiled ms':>12} {'numpy ms':>10} {'speedup':>8}")
    for name, (fast, slow) in cases(args.steps).items():
        fast()  # compile outside the timing
        tf = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        ts = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24} {tf:12.3f} {ts:10.3f} {ts / tf:7.1f}x")


if __name__ == "__main__":
    main()
