"""Hot loops: closed-loop rollouts and Riccati/Lyapunov value iteration.

Each kernel is written once in plain numpy-compatible Python. When numba is
importable and ``SAFESWITCH_DISABLE_NUMBA`` is unset (or ``0``), the public
names are the ``@njit``-compiled versions; otherwise they are the pure
Python/numpy originals. The ``*_py`` names always refer to the uncompiled
functions so benchmarks and equivalence tests can compare both paths.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.signal import lfilter

_flag = os.environ.get("SAFESWITCH_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = _flag in ("", "0", "false", "no")

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    USE_NUMBA = False
    njit = None


def _jit(fn):
    if USE_NUMBA:
        return njit(cache=True)(fn)
    return fn


def rollout_py(A, B, K, x0, noise, explore, Q, R, limit, chunk=4096):
    """Simulate x_{t+1} = A x + B (K x + e_t) + w_t.

    Returns (states, inputs, costs, diverged_at); diverged_at is -1 when every
    state stayed below ``limit`` in absolute value. Entries past a divergence are zero.
    """
    T = noise.shape[0]
    n = A.shape[0]
    m = B.shape[1]
    L = A + B @ K
    drive = noise + explore @ B.T
    states = np.zeros((T + 1, n))
    states[0] = x0
    diverged = -1
    with np.errstate(over="ignore", invalid="ignore"):
        if n == 1:
            # first-order recursion as a linear filter
            states[1:, 0] = lfilter([1.0], [1.0, -L[0, 0]], drive[:, 0], zi=[L[0, 0] * states[0, 0]])[0]
            chunk = T
        x = states[0].copy()
        for s in range(0, T, chunk):
            e = min(s + chunk, T)
            if n > 1:
                for t in range(s, e):
                    x = L @ x + drive[t]
                    states[t + 1] = x
            bad = ~np.all(np.abs(states[s + 1 : e + 1]) <= limit, axis=1)
            if bad.any():
                diverged = s + 1 + int(np.argmax(bad))
                states[diverged + 1 :] = 0.0
                break
    stop = T if diverged < 0 else diverged
    X = states[:stop]
    inputs = np.zeros((T, m))
    costs = np.zeros(T)
    inputs[:stop] = X @ K.T + explore[:stop]
    U = inputs[:stop]
    costs[:stop] = np.einsum("ti,ij,tj->t", X, Q, X) + np.einsum("ti,ij,tj->t", U, R, U)
    return states, inputs, costs, diverged


def riccati_iterate_py(A, B, Q, R, tol, max_iter, blowup):
    """Value iteration P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q.

    Returns (P, iterations, last_change). Iteration stops early when the
    largest entry of P exceeds ``blowup``.
    """
    P = Q.copy()
    change = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        S = R + B.T @ P @ B
        G = B.T @ P @ A
        Pn = Q + A.T @ P @ A - G.T @ np.linalg.solve(S, G)
        Pn = 0.5 * (Pn + Pn.T)
        change = np.max(np.abs(Pn - P))
        P = Pn
        if change <= tol * max(1.0, np.max(np.abs(P))):
            break
        if np.max(np.abs(P)) > blowup or not np.all(np.isfinite(P)):
            break
    return P, it, change


def lyapunov_iterate_py(L, H, tol, max_iter, blowup):
    """Fixed point of P = H + L'PL by plain iteration from P = H."""
    P = H.copy()
    change = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Pn = H + L.T @ P @ L
        Pn = 0.5 * (Pn + Pn.T)
        change = np.max(np.abs(Pn - P))
        P = Pn
        if change <= tol * max(1.0, np.max(np.abs(P))):
            break
        if np.max(np.abs(P)) > blowup or not np.all(np.isfinite(P)):
            break
    return P, it, change


def _rollout_loops(A, B, K, x0, noise, explore, Q, R, limit):
    # Same recursion with scalar loops; allocation-free inside the time loop once compiled.
    T = noise.shape[0]
    n = A.shape[0]
    m = B.shape[1]
    states = np.zeros((T + 1, n))
    inputs = np.zeros((T, m))
    costs = np.zeros(T)
    for a in range(n):
        states[0, a] = x0[a]
    diverged = -1
    for t in range(T):
        c = 0.0
        for a in range(m):
            v = explore[t, a]
            for b in range(n):
                v += K[a, b] * states[t, b]
            inputs[t, a] = v
        for a in range(n):
            qa = 0.0
            for b in range(n):
                qa += Q[a, b] * states[t, b]
            c += states[t, a] * qa
        for a in range(m):
            ra = 0.0
            for b in range(m):
                ra += R[a, b] * inputs[t, b]
            c += inputs[t, a] * ra
        costs[t] = c
        bad = False
        for a in range(n):
            v = noise[t, a]
            for b in range(n):
                v += A[a, b] * states[t, b]
            for b in range(m):
                v += B[a, b] * inputs[t, b]
            states[t + 1, a] = v
            if not abs(v) <= limit:
                bad = True
        if bad:
            diverged = t + 1
            break
    return states, inputs, costs, diverged


rollout = _jit(_rollout_loops) if USE_NUMBA else rollout_py
riccati_iterate = _jit(riccati_iterate_py)
lyapunov_iterate = _jit(lyapunov_iterate_py)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
