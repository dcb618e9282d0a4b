"""Switched linear plant, mode containers, noise and the switch sequence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DivergenceError, ProtocolError, ValidationError

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a matrix")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return np.ascontiguousarray(arr)


def _check_spd(M: np.ndarray, name: str, tol: float = 1e-12) -> None:
    if M.shape[0] != M.shape[1]:
        raise ValidationError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise ValidationError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= tol:
        raise ValidationError(f"{name} must be positive definite")


@dataclass(frozen=True)
class ModeDynamics:
    A: np.ndarray
    B: np.ndarray
    mode_id: int = 0

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise ValidationError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValidationError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def theta(self) -> np.ndarray:
        """Stacked parameter (A, B)^T of shape (n+m, n)."""
        return np.vstack([self.A.T, self.B.T])

    @classmethod
    def from_theta(cls, theta: np.ndarray, n: int, mode_id: int = 0) -> "ModeDynamics":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:n].T.copy(), theta[n:].T.copy(), mode_id)

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        return self.A + self.B @ np.atleast_2d(K)


@dataclass(frozen=True)
class CostMatrices:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        _check_spd(Q, "Q")
        _check_spd(R, "R")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "R", 0.5 * (R + R.T))

    @property
    def eig_range(self) -> tuple[float, float]:
        eq = np.linalg.eigvalsh(self.Q)
        er = np.linalg.eigvalsh(self.R)
        return float(min(eq[0], er[0])), float(max(eq[-1], er[-1]))

    @property
    def block(self) -> np.ndarray:
        n, m = self.Q.shape[0], self.R.shape[0]
        D = np.zeros((n + m, n + m))
        D[:n, :n] = self.Q
        D[n:, n:] = self.R
        return D


@dataclass(frozen=True)
class ModeBounds:
    """Known per-mode constants: cost eigenvalue range, parameter norm bound
    and an upper bound on the optimal average cost."""

    alpha0: float
    alpha1: float
    vartheta: float
    nu: float

    def __post_init__(self):
        if not (0 < self.alpha0 <= self.alpha1):
            raise ValidationError("need 0 < alpha0 <= alpha1")
        if self.vartheta <= 0 or self.nu <= 0:
            raise ValidationError("vartheta and nu must be positive")

    def admits(self, costs: CostMatrices, tol: float = 1e-9) -> bool:
        lo, hi = costs.eig_range
        return lo >= self.alpha0 - tol and hi <= self.alpha1 + tol


@dataclass(frozen=True)
class Mode:
    dynamics: ModeDynamics
    costs: CostMatrices
    bounds: ModeBounds

    def __post_init__(self):
        d, c = self.dynamics, self.costs
        if c.Q.shape != (d.n, d.n) or c.R.shape != (d.m, d.m):
            raise ValidationError("cost matrix shapes do not match the dynamics")
        if not self.bounds.admits(c):
            raise ValidationError("cost eigenvalues fall outside [alpha0, alpha1]")
        if np.linalg.norm(d.theta, 2) > self.bounds.vartheta * (1 + 1e-12):
            log.warning("mode %d: ||theta|| exceeds vartheta", d.mode_id)


@dataclass(frozen=True)
class NoiseModel:
    """Process noise: ``gaussian``, ``truncated`` (redrawn beyond 6 sigma) or ``zero``."""

    sigma_w: float = 1.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "truncated", "zero"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if self.sigma_w < 0:
            raise ValidationError("sigma_w must be non-negative")

    def draw(self, rng: np.random.Generator, steps: int, n: int) -> np.ndarray:
        if self.kind == "zero" or self.sigma_w == 0:
            return np.zeros((steps, n))
        w = rng.standard_normal((steps, n))
        if self.kind == "truncated":
            bad = np.abs(w) > 6.0
            while bad.any():
                w[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(w) > 6.0
        return self.sigma_w * w


@dataclass
class EpochTrace:
    mode: int
    states: np.ndarray
    inputs: np.ndarray
    costs: np.ndarray
    start_time: int

    @property
    def duration(self) -> int:
        return len(self.costs)

    def regressors(self) -> tuple[np.ndarray, np.ndarray]:
        """Rows z_t = (x_t, u_t) and the matching x_{t+1}."""
        T = self.duration
        return np.hstack([self.states[:T], self.inputs]), self.states[1 : T + 1]


def stage_cost(x: np.ndarray, u: np.ndarray, costs: CostMatrices) -> float:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return float(x @ costs.Q @ x + u @ costs.R @ u)


class SwitchSequence:
    """Reveals mode ids one at a time and then signals termination with ``None``.

    The first reveal is the initial mode; each later reveal is the next mode.
    A scripted list reveals its entries in order. A seeded sequence draws the
    next mode uniformly (excluding the current one unless ``allow_repeat``)
    and stops either after ``n_switches`` switches or, when ``stop_prob`` is
    given, with that probability after each reveal.
    """

    def __init__(self, script: Sequence[int] | None = None, *, n_modes: int | None = None,
                 n_switches: int | None = None, stop_prob: float | None = None,
                 seed: int | None = None, allow_repeat: bool = False):
        if script is None and n_modes is None:
            raise ValidationError("give a script or n_modes")
        if script is not None and len(script) == 0:
            raise ValidationError("script must contain at least the initial mode")
        if script is None and n_switches is None and stop_prob is None:
            raise ValidationError("a seeded sequence needs n_switches or stop_prob")
        self._script = list(script) if script is not None else None
        self.n_modes = n_modes
        self.n_switches = n_switches
        self.stop_prob = stop_prob
        self.allow_repeat = allow_repeat
        self._rng = np.random.default_rng(seed)
        self._revealed: list[int] = []
        self.terminated = False

    @property
    def revealed(self) -> list[int]:
        return list(self._revealed)

    def _next_seeded(self) -> int | None:
        k = len(self._revealed)
        if k > 0:
            if self.n_switches is not None and k > self.n_switches:
                return None
            if self.stop_prob is not None and self._rng.random() < self.stop_prob:
                return None
        if k == 0 or self.allow_repeat or self.n_modes == 1:
            return int(self._rng.integers(self.n_modes))
        prev = self._revealed[-1]
        j = int(self._rng.integers(self.n_modes - 1))
        return j + 1 if j >= prev else j

    def reveal_next(self) -> int | None:
        if self.terminated:
            raise ProtocolError("reveal requested after termination")
        if self._script is not None:
            nxt = self._script[len(self._revealed)] if len(self._revealed) < len(self._script) else None
        else:
            nxt = self._next_seeded()
        if nxt is None:
            self.terminated = True
            return None
        self._revealed.append(int(nxt))
        return int(nxt)

    def materialize(self) -> list[int]:
        """Drain the sequence and return every revealed id."""
        while not self.terminated:
            self.reveal_next()
        return self.revealed


@dataclass
class SwitchedPlant:
    modes: list[Mode]
    noise: NoiseModel = field(default_factory=NoiseModel)
    x0: np.ndarray | None = None

    def __post_init__(self):
        if not self.modes:
            raise ValidationError("plant needs at least one mode")
        n, m = self.modes[0].dynamics.n, self.modes[0].dynamics.m
        for md in self.modes:
            if (md.dynamics.n, md.dynamics.m) != (n, m):
                raise ValidationError("all modes must share state and input dimensions")
        self.n, self.m = n, m
        self.x0 = np.zeros(n) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(n)
        self.reset()

    def reset(self, x0: np.ndarray | None = None) -> None:
        self.state = np.array(self.x0 if x0 is None else x0, dtype=float).reshape(self.n)
        self.clock = 0
        self.current_mode: int | None = None

    def set_mode(self, mode_id: int) -> None:
        if not 0 <= mode_id < len(self.modes):
            raise ValidationError(f"unknown mode {mode_id}")
        self.current_mode = mode_id

    def _mode(self) -> Mode:
        if self.current_mode is None:
            raise ProtocolError("no active mode")
        return self.modes[self.current_mode]

    def step(self, u: np.ndarray, noise_draw: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float).ravel()
        w = np.asarray(noise_draw, dtype=float).ravel()
        if u.size != self.m or w.size != self.n:
            raise ValidationError(f"expected input of size {self.m} and noise of size {self.n}")
        if not np.all(np.isfinite(u)):
            raise ValidationError("input has non-finite entries")
        d = self._mode().dynamics
        nxt = d.A @ self.state + d.B @ u + w
        if np.max(np.abs(nxt)) > DIVERGENCE_LIMIT or not np.all(np.isfinite(nxt)):
            raise DivergenceError(self.clock + 1)
        self.state = nxt
        self.clock += 1
        return nxt.copy()

    def simulate_epoch(self, K: np.ndarray, duration: int, rng: np.random.Generator,
                       explore: np.ndarray | None = None) -> EpochTrace:
        """Run ``duration`` steps under u = K x (+ explore) in the active mode."""
        md = self._mode()
        if duration < 0:
            raise ValidationError("duration must be non-negative")
        K = np.ascontiguousarray(np.atleast_2d(np.asarray(K, dtype=float)))
        if K.shape != (self.m, self.n):
            raise ValidationError(f"gain has shape {K.shape}, expected {(self.m, self.n)}")
        noise = np.ascontiguousarray(self.noise.draw(rng, duration, self.n))
        if explore is None:
            explore = np.zeros((duration, self.m))
        explore = np.ascontiguousarray(np.asarray(explore, dtype=float).reshape(duration, self.m))
        states, inputs, costs, div = kernels.rollout(
            md.dynamics.A, md.dynamics.B, K, self.state.copy(), noise, explore,
            md.costs.Q, md.costs.R, DIVERGENCE_LIMIT)
        if div >= 0:
            raise DivergenceError(self.clock + int(div))
        trace = EpochTrace(self.current_mode, states, inputs, costs, self.clock)
        self.state = states[-1].copy()
        self.clock += duration
        return trace

    def spectral_radius(self, mode_id: int, K: np.ndarray) -> float:
        """Closed-loop spectral radius; diagnostic use only."""
        L = self.modes[mode_id].dynamics.closed_loop(K)
        return float(np.max(np.abs(np.linalg.eigvals(L))))
