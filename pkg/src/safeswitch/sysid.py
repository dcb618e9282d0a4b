"""Regularized least squares per mode with high-probability confidence ellipsoids."""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ValidationError
from .plant import ModeBounds


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


class Dataset:
    """Regressor rows z = (x, u) and targets x_next for one mode."""

    def __init__(self, n: int, m: int, mode: int = 0):
        self.n, self.m, self.mode = n, m, mode
        self._chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.count = 0
        self.gram = np.zeros((n + m, n + m))
        self.cross = np.zeros((n + m, n))

    def add(self, z, x_next, t: int = -1) -> None:
        self.extend(np.atleast_2d(z), np.atleast_2d(x_next), [t])

    def extend(self, Z: np.ndarray, X: np.ndarray, times: Iterable[int] | None = None) -> None:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if Z.shape[0] == 0:
            return
        if Z.shape[1] != self.n + self.m or X.shape != (Z.shape[0], self.n):
            raise ValidationError("regressor or target shape mismatch")
        if times is None:
            t = np.full(Z.shape[0], -1, dtype=int)
        elif isinstance(times, range):
            t = np.arange(times.start, times.stop, times.step, dtype=int)
        else:
            t = np.fromiter(times, dtype=int)
        self._chunks.append((Z.copy(), X.copy(), t))
        self.count += Z.shape[0]
        self.gram = _sym(self.gram + Z.T @ Z)
        self.cross = self.cross + Z.T @ X

    def _cat(self, k: int, width: int) -> np.ndarray:
        if not self._chunks:
            return np.zeros((0, width))
        return np.concatenate([c[k] for c in self._chunks])

    @property
    def Z(self) -> np.ndarray:
        return self._cat(0, self.n + self.m)

    @property
    def X(self) -> np.ndarray:
        return self._cat(1, self.n)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([c[2] for c in self._chunks]) if self._chunks else np.zeros(0, dtype=int)

    def copy(self) -> "Dataset":
        out = Dataset(self.n, self.m, self.mode)
        out._chunks = list(self._chunks)
        out.count = self.count
        out.gram, out.cross = self.gram.copy(), self.cross.copy()
        return out

    def rows(self):
        for Z, X, T in self._chunks:
            for t, z, x in zip(T, Z, X):
                yield [int(t), self.mode, *z.tolist(), *x.tolist()]


def write_datasets_csv(path, datasets: Iterable[Dataset]) -> None:
    datasets = list(datasets)
    if not datasets:
        raise ValidationError("no datasets to write")
    n, m = datasets[0].n, datasets[0].m
    header = ["t", "mode"] + [f"z{k}" for k in range(n + m)] + [f"x_next{k}" for k in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for d in datasets:
            for row in d.rows():
                w.writerow(row[:2] + [repr(float(v)) for v in row[2:]])


def read_datasets_csv(path, n: int, m: int) -> dict[int, Dataset]:
    out: dict[int, Dataset] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            mode = int(row[1])
            vals = [float(v) for v in row[2:]]
            out.setdefault(mode, Dataset(n, m, mode)).add(vals[: n + m], vals[n + m :], int(row[0]))
    return out


def rls_estimate(data: Dataset, lam: float, theta_prior: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of ||X - Z Theta||_F^2 + lam ||Theta - Theta_0||_F^2."""
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    d = data.n + data.m
    prior = np.zeros((d, data.n)) if theta_prior is None else np.asarray(theta_prior, dtype=float)
    V = _sym(lam * np.eye(d) + data.gram)
    return cho_solve(cho_factor(V), data.cross + lam * prior)


def _log_det_ratio(V: np.ndarray, lam: float) -> float:
    sign, logdet = np.linalg.slogdet(_sym(V))
    if sign <= 0:
        raise ValidationError("V must be positive definite")
    return logdet - V.shape[0] * math.log(lam)


def _noise_term(V, lam, delta, sigma_w, n_state) -> float:
    if not 0.0 < delta < 1.0:
        raise ValidationError("delta must lie in (0, 1)")
    inner = math.log(n_state) - math.log(delta) + _log_det_ratio(V, lam)
    if inner < -1e-12:
        raise ValidationError("det(V) smaller than det(lambda I)")
    return sigma_w * math.sqrt(2.0 * n_state * max(inner, 0.0))


def confidence_radius(V, lam: float, delta: float, epsilon_prior: float, sigma_w: float, n_state: int) -> float:
    return (_noise_term(V, lam, delta, sigma_w, n_state) + math.sqrt(lam) * epsilon_prior) ** 2


def warmup_radius(V, lam: float, delta: float, vartheta: float, sigma_w: float, n_state: int) -> float:
    return (_noise_term(V, lam, delta, sigma_w, n_state) + math.sqrt(lam * vartheta)) ** 2


@dataclass(frozen=True)
class ConfidenceSet:
    theta_hat: np.ndarray
    V: np.ndarray
    r: float
    lam: float
    delta: float
    n_samples: int
    epsilon_prior: float
    gram_norm: float = 0.0
    kind: str = "main"
    timestamp: int = 0

    @property
    def n(self) -> int:
        return self.theta_hat.shape[1]

    def V_inv(self) -> np.ndarray:
        return cho_solve(cho_factor(self.V), np.eye(self.V.shape[0]))


def contains(conf: ConfidenceSet, theta: np.ndarray, slack: float = 0.0) -> bool:
    D = np.asarray(theta, dtype=float) - conf.theta_hat
    return bool(np.trace(D.T @ conf.V @ D) <= conf.r + slack)


def ellipsoid_distance(conf: ConfidenceSet, theta: np.ndarray) -> float:
    D = np.asarray(theta, dtype=float) - conf.theta_hat
    return float(np.trace(D.T @ conf.V @ D))


def mu_inflation(conf: ConfidenceSet, vartheta: float) -> float:
    """Radius inflation used by the relaxed synthesis program.

    Largest of three sufficient choices: the in-text rule, the appendix rule and
    ``r + 2 sqrt(r) vartheta ||V||^1/2``, which is what the perturbation argument
    for the relaxed Bellman inequality actually consumes.
    """
    r = conf.r
    if r <= 0:
        return 0.0
    vnorm = math.sqrt(float(np.linalg.eigvalsh(conf.V)[-1]))
    a = r + math.sqrt(r) * vartheta * vnorm
    b = r * (1.0 + 2.0 * vartheta * math.sqrt(conf.n_samples + conf.gram_norm))
    c = r + 2.0 * math.sqrt(r) * vartheta * vnorm
    return max(a, b, c)


def lambda_floor(mu: float, bounds: ModeBounds, sigma_w: float) -> float:
    return 4.0 * mu * bounds.nu / (bounds.alpha0 * sigma_w**2)


def lambda_select(bounds: ModeBounds, sigma_w: float, conf_prev: ConfidenceSet | None = None,
                  lam_prev: float | None = None) -> float:
    """Regularizer for the next estimate, never below the previous one."""
    if conf_prev is None:
        warm = sigma_w**2 / bounds.vartheta**2
        return warm if lam_prev is None else max(lam_prev, warm)
    prev = conf_prev.lam if lam_prev is None else lam_prev
    return max(prev, lambda_floor(mu_inflation(conf_prev, bounds.vartheta), bounds, sigma_w))


def build_confidence_set(data: Dataset, lam: float, theta_prior: np.ndarray | None, epsilon_prior: float,
                         delta: float, sigma_w: float, *, kind: str = "main", vartheta: float | None = None,
                         timestamp: int = 0, zero_radius: bool = False) -> ConfidenceSet:
    d = data.n + data.m
    V = _sym(lam * np.eye(d) + data.gram)
    theta_hat = rls_estimate(data, lam, theta_prior)
    if zero_radius:
        r = 0.0
    elif kind == "warmup":
        r = warmup_radius(V, lam, delta, vartheta, sigma_w, data.n)
    else:
        r = confidence_radius(V, lam, delta, epsilon_prior, sigma_w, data.n)
    gnorm = float(np.linalg.eigvalsh(data.gram)[-1]) if data.count else 0.0
    return ConfidenceSet(theta_hat, V, r, lam, delta, data.count, epsilon_prior, gnorm, kind, timestamp)


def prior_error_bound(conf: ConfidenceSet) -> float:
    """Frobenius bound on Theta* - theta_hat implied by membership: sqrt(r / lambda_min(V))."""
    return math.sqrt(conf.r / float(np.linalg.eigvalsh(conf.V)[0]))


@dataclass
class Registry:
    """Most recent confidence set per mode, with write serialization."""

    entries: dict[int, ConfidenceSet] = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    def update(self, mode: int, conf: ConfidenceSet, timestamp: int | None = None) -> None:
        if timestamp is not None:
            conf = replace(conf, timestamp=int(timestamp))
        with self._lock:
            old = self.entries.get(mode)
            if old is not None and conf.timestamp < old.timestamp:
                raise ValidationError("registry timestamps must not decrease")
            self.entries[mode] = conf

    def get(self, mode: int) -> ConfidenceSet:
        return self.entries[mode]

    def __contains__(self, mode: int) -> bool:
        return mode in self.entries

    def snapshot(self) -> dict[int, ConfidenceSet]:
        with self._lock:
            return dict(self.entries)
