"""The switching learner: warm-up, the epoch loop, and run diagnostics.

The learner only touches the plant through ``set_mode`` and
``simulate_epoch`` and only knows the cost matrices, the per-mode bounds and
the noise level. Ground truth enters through :class:`GroundTruth`, which the
diagnostics, the regret report and the known-parameter baseline consume.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import knownlqr, ofu, sysid
from .errors import (DivergenceError, PreconditionError, SafeSwitchError, StabilityError,
                     ValidationError)
from .plant import CostMatrices, ModeBounds, ModeDynamics, SwitchedPlant, SwitchSequence

log = logging.getLogger(__name__)


@dataclass
class SfsaConfig:
    costs: list[CostMatrices]
    bounds: list[ModeBounds]
    sigma_w: float
    alpha_bar: float
    delta: float = 0.1
    union_bound: bool = False
    reuse_warmup_data: bool = False
    zero_radius: bool = False
    enforce_precondition: bool = True
    lambda_iterations: int = 100
    sdp_tol: float = 1e-7
    debug_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha_bar < 1.0:
            raise ValidationError("alpha_bar must lie in (0, 1)")
        if not 0.0 < self.delta < 1.0:
            raise ValidationError("delta must lie in (0, 1)")
        if len(self.costs) != len(self.bounds):
            raise ValidationError("need one cost pair and one bound set per mode")

    @property
    def n_modes(self) -> int:
        return len(self.costs)

    @property
    def delta_eff(self) -> float:
        return self.delta / self.n_modes if self.union_bound else self.delta

    @property
    def W(self) -> np.ndarray:
        n = self.costs[0].Q.shape[0]
        return self.sigma_w**2 * np.eye(n)


# --------------------------------------------------------------------------- warm-up


@dataclass
class WarmupResult:
    datasets: dict[int, sysid.Dataset]
    confs: dict[int, sysid.ConfidenceSet]
    centers: dict[int, np.ndarray]
    epsilons: dict[int, float]
    steps: int


def warmup(plant: SwitchedPlant, K0: Sequence[np.ndarray], T0: Sequence[int], config: SfsaConfig,
           rng: np.random.Generator, kappa0: Sequence[float] | None = None) -> WarmupResult:
    """Explore each mode in turn with u = K0 x + eta, eta ~ N(0, 2 sigma^2 kappa0^2 I).

    The initial gains are checked against the plant before anything runs.
    """
    M = config.n_modes
    if len(K0) != M or len(T0) != M:
        raise ValidationError("need one initial gain and one duration per mode")
    kappa0 = [1.0] * M if kappa0 is None else list(kappa0)
    for i in range(M):
        if T0[i] < 0:
            raise ValidationError("warm-up durations must be non-negative")
        if plant.spectral_radius(i, np.atleast_2d(K0[i])) >= 1.0:
            raise StabilityError(f"initial gain for mode {i} does not stabilize it")
    n, m = plant.n, plant.m
    datasets, confs, centers, eps = {}, {}, {}, {}
    for i in range(M):
        plant.set_mode(i)
        scale = math.sqrt(2.0) * config.sigma_w * kappa0[i]
        explore = scale * rng.standard_normal((int(T0[i]), m))
        trace = plant.simulate_epoch(np.atleast_2d(K0[i]), int(T0[i]), rng, explore=explore)
        data = sysid.Dataset(n, m, i)
        Z, X = trace.regressors()
        data.extend(Z, X, range(trace.start_time, trace.start_time + trace.duration))
        b = config.bounds[i]
        lam = config.sigma_w**2 / b.vartheta**2
        conf = sysid.build_confidence_set(data, lam, None, 0.0, config.delta_eff, config.sigma_w,
                                          kind="warmup", vartheta=b.vartheta, timestamp=plant.clock)
        datasets[i], confs[i] = data, conf
        centers[i] = conf.theta_hat
        eps[i] = sysid.prior_error_bound(conf)
    return WarmupResult(datasets, confs, centers, eps, sum(int(t) for t in T0))


@dataclass(frozen=True)
class WarmupCheck:
    first_ok: bool
    first_margin: float
    second_ok: bool
    second_margin: float

    @property
    def ok(self) -> bool:
        return self.first_ok and self.second_ok


def warmup_duration_check(T0: int, bounds: ModeBounds, kappa0: float, gamma0: float, delta: float,
                          epsilon_tilde: float, *, sigma_w: float = 1.0, n: int = 1, lam: float | None = None,
                          ns: int | None = None, tau_max: float | None = None,
                          order_constant: float = 1.0) -> WarmupCheck:
    """Evaluate both warm-up length conditions; margins are positive when satisfied.

    The second (order) condition is only evaluated when ``ns`` and ``tau_max``
    are given; its unknown constant is ``order_constant``.
    """
    if T0 < 1:
        return WarmupCheck(False, -math.inf, False, -math.inf)
    lam = sigma_w**2 / bounds.vartheta**2 if lam is None else lam
    v = bounds.vartheta
    growth = 300.0 * sigma_w**2 * kappa0**4 / gamma0**2 * (n + v**2 * kappa0**2) * math.log(max(T0 / delta, 1.0))
    inner = 2 * n * (math.log(n / delta) + math.log1p(growth))
    lhs = 80.0 / (T0 * sigma_w**2) * (sigma_w * math.sqrt(inner) + math.sqrt(lam) * v) ** 2
    first_margin = epsilon_tilde**2 - lhs
    if ns is None or tau_max is None:
        return WarmupCheck(first_margin >= 0, first_margin, True, math.inf)
    h = ns * tau_max
    need = order_constant * (n**2 * bounds.nu**2 * v / (bounds.alpha0**5 * sigma_w**10)) * math.sqrt(
        h * math.log(h / delta) ** 2)
    return WarmupCheck(first_margin >= 0, first_margin, T0 >= need, T0 - need)


# --------------------------------------------------------------------------- learner


@dataclass
class Synthesis:
    mode: int
    next_mode: int
    sol: ofu.RelaxedSolution
    P_next: np.ndarray
    dwell: ofu.OnlineDwell
    mu_next: float
    precondition_margin: float

    @property
    def K(self) -> np.ndarray:
        return self.sol.K

    @property
    def tau(self) -> int:
        return self.dwell.tau


def _mu(conf: sysid.ConfidenceSet, bounds: ModeBounds) -> float:
    return 0.0 if conf.r == 0 else sysid.mu_inflation(conf, bounds.vartheta)


def synthesize(snapshot: dict[int, sysid.ConfidenceSet], i: int, j: int, config: SfsaConfig,
               dual_cache: dict | None = None, debug_path=None) -> Synthesis:
    """Gain, value matrices and dwell time for the epoch i -> j.

    Depends only on the registry snapshot and the configuration.
    """
    conf_i, conf_j = snapshot[i], snapshot[j]
    b_i = config.bounds[i]
    mu_i, mu_j = _mu(conf_i, b_i), _mu(conf_j, config.bounds[j])
    margin = ofu.precondition_margin(conf_i, mu_i, b_i, config.sigma_w)
    key_i = (i, conf_i.timestamp)
    cached = dual_cache.get(key_i) if dual_cache is not None else None
    sol = ofu.solve_relaxed(conf_i, config.costs[i], mu_i, config.W,
                            bounds=b_i if config.enforce_precondition else None,
                            sigma_w=config.sigma_w, tol=config.sdp_tol, debug_path=debug_path, dual=cached)
    if dual_cache is not None and cached is None:
        dual_cache[key_i] = (None, sol.dual)
    if j == i:
        P_j = sol.P
    else:
        key = (j, conf_j.timestamp)
        hit = dual_cache.get(key) if dual_cache is not None else None
        if hit is None:
            hit = ofu.solve_relaxed_dual(conf_j, config.costs[j], mu_j, config.W, tol=config.sdp_tol, full=True)
            if dual_cache is not None:
                dual_cache[key] = hit
        P_j = hit[1].blocks["P"]
    dwell = ofu.tau_estimate(sol, P_j, config.costs[i], config.alpha_bar)
    return Synthesis(i, j, sol, P_j, dwell, mu_j, margin)


class SfsaLearner:
    """Per-mode datasets, regularizers and the confidence-set registry."""

    def __init__(self, config: SfsaConfig, n: int, m: int):
        self.config = config
        self.n, self.m = n, m
        self.datasets = {i: sysid.Dataset(n, m, i) for i in range(config.n_modes)}
        self.priors: dict[int, tuple[np.ndarray, float]] = {}
        self.lam: dict[int, float] = {}
        self.registry = sysid.Registry()
        self.dual_cache: dict = {}
        self.lambda_failures = 0
        self.time_offset = 0

    @classmethod
    def from_warmup(cls, config: SfsaConfig, warm: WarmupResult, n: int, m: int) -> "SfsaLearner":
        lr = cls(config, n, m)
        for i in range(config.n_modes):
            if config.reuse_warmup_data:
                lr.datasets[i] = warm.datasets[i].copy()
            lr.priors[i] = (warm.centers[i], warm.epsilons[i])
            lr.lam[i] = sysid.lambda_select(config.bounds[i], config.sigma_w)
            lr.refresh(i, warm.steps)
        lr.time_offset = warm.steps
        return lr

    @classmethod
    def from_priors(cls, config: SfsaConfig, priors: dict[int, tuple[np.ndarray, float]], n: int,
                    m: int) -> "SfsaLearner":
        lr = cls(config, n, m)
        for i in range(config.n_modes):
            lr.priors[i] = (np.asarray(priors[i][0], dtype=float), float(priors[i][1]))
            lr.lam[i] = sysid.lambda_select(config.bounds[i], config.sigma_w)
            lr.refresh(i, 0)
        return lr

    def _build(self, i: int, lam: float, t: int) -> sysid.ConfidenceSet:
        theta0, eps = self.priors[i]
        return sysid.build_confidence_set(self.datasets[i], lam, theta0, eps, self.config.delta_eff,
                                          self.config.sigma_w, timestamp=t,
                                          zero_radius=self.config.zero_radius)

    def refresh(self, i: int, t: int) -> sysid.ConfidenceSet:
        """Rebuild mode i's ellipsoid, raising lambda until the synthesis precondition holds."""
        cfg, b = self.config, self.config.bounds[i]
        lam = self.lam[i]
        conf = self._build(i, lam, t)
        hist = [lam]
        for _ in range(cfg.lambda_iterations):
            need = sysid.lambda_floor(_mu(conf, b), b, cfg.sigma_w)
            if float(np.linalg.eigvalsh(conf.V)[0]) >= need * (1 - 1e-12):
                break
            lam = max(lam, need)
            hist.append(lam)
            if len(hist) >= 3:
                # Aitken step on a slowly contracting sequence; the map is increasing, so
                # overshooting the fixed point still satisfies the precondition.
                d1, d2 = hist[-2] - hist[-3], hist[-1] - hist[-2]
                if 0 < d2 < d1:
                    lam = (hist[-1] + d2 * d2 / (d1 - d2)) * (1 + 1e-9)
                    hist = [lam]
            conf = self._build(i, lam, t)
        else:
            self.lambda_failures += 1
            log.warning("mode %d: regularizer did not reach the synthesis precondition", i)
        self.lam[i] = lam
        self.registry.update(i, conf)
        return conf

    def observe(self, i: int, Z: np.ndarray, X: np.ndarray, times) -> None:
        self.datasets[i].extend(Z, X, times)

    def synthesize(self, i: int, j: int, debug_path=None) -> Synthesis:
        return synthesize(self.registry.snapshot(), i, j, self.config, self.dual_cache, debug_path)


# --------------------------------------------------------------------------- traces


@dataclass
class EpochRecord:
    k: int
    mode: int
    next_mode: int
    start: int
    tau_es: int
    K: np.ndarray
    P_i: np.ndarray
    P_j: np.ndarray
    mu_i: float
    mu_j: float
    eta: float
    rho: float
    chi_cross: float
    raw: float
    malignant: bool
    accumulated_cost: float
    precondition_margin: float
    conf_i: sysid.ConfidenceSet
    conf_j: sysid.ConfidenceSet
    sol: ofu.RelaxedSolution | None = None
    tau_star: int | None = None
    dwell_error_bound: float | None = None


@dataclass
class RunTrace:
    x0: np.ndarray
    epochs: list[EpochRecord] = field(default_factory=list)
    states: np.ndarray | None = None
    inputs: np.ndarray | None = None
    costs: np.ndarray | None = None
    modes: np.ndarray | None = None
    epoch_index: np.ndarray | None = None
    registry_snapshots: list[dict] = field(default_factory=list)
    status: str = "complete"
    error: str | None = None
    seeds: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return 0 if self.costs is None else len(self.costs)

    @property
    def total_time(self) -> int:
        return sum(e.tau_es for e in self.epochs)

    @property
    def ns(self) -> int:
        return len(self.epochs)

    @property
    def J_alg(self) -> float:
        return float(self.costs.sum()) if self.costs is not None else 0.0


def _assemble(x0, pieces) -> dict:
    n = len(x0)
    if not pieces:
        return dict(states=np.asarray(x0, dtype=float).reshape(1, n), inputs=np.zeros((0, 0)),
                    costs=np.zeros(0), modes=np.zeros(0, dtype=int), epoch_index=np.zeros(0, dtype=int))
    states = [np.asarray(x0, dtype=float).reshape(1, n)] + [p.states[1:] for p in pieces]
    return dict(
        states=np.vstack(states),
        inputs=np.vstack([p.inputs for p in pieces]),
        costs=np.concatenate([p.costs for p in pieces]),
        modes=np.concatenate([np.full(p.duration, p.mode, dtype=int) for p in pieces]),
        epoch_index=np.concatenate([np.full(p.duration, k, dtype=int) for k, p in enumerate(pieces)]),
    )


def _registry_summary(snapshot: dict[int, sysid.ConfidenceSet]) -> dict:
    return {i: {"timestamp": c.timestamp, "n_samples": c.n_samples, "radius": c.r, "lambda": c.lam}
            for i, c in sorted(snapshot.items())}


def run(plant: SwitchedPlant, sequence: SwitchSequence, learner: SfsaLearner,
        rng: np.random.Generator, *, keep_solutions: bool = True) -> RunTrace:
    """Execute the epoch loop until the sequence terminates.

    Synthesis or divergence failures end the run with status ``aborted``; the
    epochs completed so far are kept.
    """
    plant.reset()
    trace = RunTrace(x0=plant.state.copy())
    pieces = []
    i = sequence.reveal_next()
    k = 0
    try:
        while i is not None:
            j = sequence.reveal_next()
            if j is None:
                break
            snap = learner.registry.snapshot()
            trace.registry_snapshots.append(_registry_summary(snap))
            dbg = None
            if learner.config.debug_dir:
                dbg = os.path.join(learner.config.debug_dir, f"sdp_epoch{k:04d}.json")
            syn = learner.synthesize(i, j, debug_path=dbg)
            plant.set_mode(i)
            piece = plant.simulate_epoch(syn.K, syn.tau, rng)
            Z, X = piece.regressors()
            learner.observe(i, Z, X, range(piece.start_time, piece.start_time + piece.duration))
            learner.refresh(i, learner.time_offset + plant.clock)
            d = syn.dwell.decision
            pieces.append(piece)
            trace.epochs.append(EpochRecord(
                k=k, mode=i, next_mode=j, start=piece.start_time, tau_es=syn.tau, K=syn.K,
                P_i=syn.sol.P, P_j=syn.P_next, mu_i=syn.sol.mu, mu_j=syn.mu_next, eta=d.eta, rho=d.rho,
                chi_cross=d.chi_cross, raw=d.raw, malignant=d.malignant,
                accumulated_cost=float(piece.costs.sum()), precondition_margin=syn.precondition_margin,
                conf_i=snap[i], conf_j=snap[j], sol=syn.sol if keep_solutions else None))
            k += 1
            i = j
    except SafeSwitchError as exc:
        trace.status, trace.error = "aborted", f"{type(exc).__name__}: {exc}"
        log.warning("run aborted after %d epochs: %s", k, trace.error)
    for key, val in _assemble(trace.x0, pieces).items():
        setattr(trace, key, val)
    return trace


# --------------------------------------------------------------------------- ground truth


@dataclass
class GroundTruth:
    dynamics: list[ModeDynamics]
    costs: list[CostMatrices]
    bounds: list[ModeBounds]
    dares: list[knownlqr.DareSolution]
    tau_star: np.ndarray
    sigma_w: float
    alpha_bar: float

    @classmethod
    def from_plant(cls, plant: SwitchedPlant, alpha_bar: float) -> "GroundTruth":
        sigma = plant.noise.sigma_w
        dyn = [md.dynamics for md in plant.modes]
        costs = [md.costs for md in plant.modes]
        dares = [knownlqr.solve_dare(d, c, sigma) for d, c in zip(dyn, costs)]
        tau = knownlqr.dwell_star_table(dares, costs, alpha_bar)
        return cls(dyn, costs, [md.bounds for md in plant.modes], dares, tau, sigma, alpha_bar)

    def j_star(self, i: int) -> float:
        return self.dares[i].J_star


def run_baseline(plant: SwitchedPlant, sequence: SwitchSequence, truth: GroundTruth,
                 rng: np.random.Generator, *, expected_cost: bool = False) -> RunTrace:
    """Known-parameter strategy: Riccati gains held for the benchmark dwell times.

    With ``expected_cost`` the per-step cost is replaced by the mode's optimal
    average cost, which makes the strategy's regret against itself exactly zero.
    """
    plant.reset()
    trace = RunTrace(x0=plant.state.copy())
    pieces = []
    i = sequence.reveal_next()
    k = 0
    try:
        while i is not None:
            j = sequence.reveal_next()
            if j is None:
                break
            dare = truth.dares[i]
            tau = int(truth.tau_star[i, j])
            plant.set_mode(i)
            piece = plant.simulate_epoch(dare.K_star, tau, rng)
            if expected_cost:
                piece.costs = np.full(tau, dare.J_star)
            pieces.append(piece)
            trace.epochs.append(EpochRecord(
                k=k, mode=i, next_mode=j, start=piece.start_time, tau_es=tau, K=dare.K_star,
                P_i=dare.P_star, P_j=truth.dares[j].P_star, mu_i=0.0, mu_j=0.0, eta=float("nan"),
                rho=float("nan"), chi_cross=float("nan"), raw=float("nan"), malignant=False,
                accumulated_cost=float(piece.costs.sum()), precondition_margin=float("inf"),
                conf_i=None, conf_j=None, tau_star=tau))
            k += 1
            i = j
    except DivergenceError as exc:
        trace.status, trace.error = "aborted", str(exc)
    for key, val in _assemble(trace.x0, pieces).items():
        setattr(trace, key, val)
    return trace


# --------------------------------------------------------------------------- diagnostics


@dataclass
class EpochDiagnostics:
    k: int
    tau_es: int
    tau_star: int
    theta_in_ci: bool
    theta_in_cj: bool
    spectral_radius: float
    gain_norm: float
    kappa: float
    gamma: float
    sandwich_low: float
    sandwich_high: float
    perturbation_slack: float
    dual_identity_residual: float
    dwell_error_bound: float
    precondition_margin: float

    @property
    def strongly_stable(self) -> bool:
        return self.spectral_radius <= 1 - self.gamma + 1e-8 and self.gain_norm <= self.kappa + 1e-8

    @property
    def dwell_ok(self) -> bool:
        return self.tau_es - self.tau_star <= self.dwell_error_bound


def annotate(trace: RunTrace, truth: GroundTruth) -> list[EpochDiagnostics]:
    """Per-epoch checks against the true parameters. Fills tau_star and the dwell bound in place."""
    out = []
    nus = [b.nu for b in truth.bounds]
    for e in trace.epochs:
        i, j = e.mode, e.next_mode
        dyn = truth.dynamics[i]
        cert = ofu.stability_params(truth.bounds[i], truth.sigma_w)
        in_i = sysid.contains(e.conf_i, dyn.theta)
        in_j = sysid.contains(e.conf_j, truth.dynamics[j].theta)
        tau_star = int(truth.tau_star[i, j])
        sol = e.sol
        chi = ofu.chi_diagnostic(sol, cert)
        lo, hi = ofu.sandwich_slacks(sol.P, chi, truth.dares[i].P_star)
        if cert.kappa > 1:
            bound = ofu.dwell_error_bound(chi, truth.bounds[i], truth.bounds[j], truth.sigma_w, cert.kappa, nus)
        else:
            bound = math.inf
        e.tau_star, e.dwell_error_bound = tau_star, bound
        out.append(EpochDiagnostics(
            k=e.k, tau_es=e.tau_es, tau_star=tau_star, theta_in_ci=in_i, theta_in_cj=in_j,
            spectral_radius=knownlqr.spectral_radius(dyn.closed_loop(e.K)),
            gain_norm=float(np.linalg.norm(e.K, 2)), kappa=cert.kappa, gamma=cert.gamma,
            sandwich_low=lo, sandwich_high=hi,
            perturbation_slack=ofu.perturbation_slack(sol, dyn, truth.costs[i]),
            dual_identity_residual=ofu.verify_dual_identity(sol, truth.costs[i]),
            dwell_error_bound=bound, precondition_margin=e.precondition_margin))
    return out


@dataclass
class RegretReport:
    J_alg: float
    J_baseline: float | None
    regret: float | None
    R1: float | None
    R2: float | None
    T_es: int
    T_star: int | None
    clipped_epochs: int = 0

    @property
    def identity_residual(self) -> float:
        if self.R1 is None:
            return float("nan")
        return abs(self.R1 + self.R2 + self.J_baseline - self.J_alg)


def expected_cost_series(trace: RunTrace, truth: GroundTruth) -> np.ndarray:
    """E[c_t] given the gains used, by propagating the state covariance through the true dynamics."""
    n = len(trace.x0)
    S = np.outer(trace.x0, trace.x0)
    out = np.zeros(trace.T)
    t = 0
    for e in trace.epochs:
        dyn, c = truth.dynamics[e.mode], truth.costs[e.mode]
        L = dyn.closed_loop(e.K)
        H = knownlqr.h_matrix(c, e.K)
        for _ in range(e.tau_es):
            out[t] = float(np.sum(H * S))
            S = L @ S @ L.T + truth.sigma_w**2 * np.eye(n)
            t += 1
    return out


def regret_report(trace: RunTrace, truth: GroundTruth | None, *, costs: np.ndarray | None = None) -> RegretReport:
    """Regret against the benchmark and its split into in-dwell and overhang parts.

    ``costs`` replaces the realized per-step costs (e.g. with
    :func:`expected_cost_series`). Without ground truth only J_alg and T_es are filled.
    """
    c = trace.costs if costs is None else np.asarray(costs, dtype=float)
    J_alg = float(c.sum()) if c is not None else 0.0
    T_es = trace.total_time
    if truth is None:
        return RegretReport(J_alg, None, None, None, None, T_es, None)
    R1 = R2 = base = 0.0
    T_star = clipped = 0
    for e in trace.epochs:
        ts = int(truth.tau_star[e.mode, e.next_mode])
        J = truth.j_star(e.mode)
        seg = c[e.start : e.start + e.tau_es]
        base += ts * J
        T_star += ts
        R1 += float(seg[: min(ts, e.tau_es)].sum()) - ts * J
        if e.tau_es > ts:
            R2 += float(seg[ts:].sum())
        elif e.tau_es < ts:
            clipped += 1
    if clipped:
        log.info("%d epochs ended before the benchmark dwell time; overhang clipped at zero", clipped)
    return RegretReport(J_alg, base, J_alg - base, R1, R2, T_es, T_star, clipped)


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 3:
        raise ValidationError("need at least three points for a growth exponent")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValidationError("log-log fit needs positive values")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@dataclass(frozen=True)
class TotalTimeSummary:
    ns: np.ndarray
    T_es: np.ndarray
    excess: np.ndarray
    slope: float
    flagged: bool


def total_time_summary(ns_values: Sequence[int], T_es_values: Sequence[float]) -> TotalTimeSummary:
    """Growth exponent of the time spent beyond one step per switch."""
    ns = np.asarray(ns_values, dtype=float)
    T = np.asarray(T_es_values, dtype=float)
    if len(np.unique(ns)) < 3:
        raise ValidationError("need at least three distinct ns values")
    excess = T - ns
    if np.all(excess <= 0):
        return TotalTimeSummary(ns, T, excess, 0.0, False)
    slope = fit_loglog_slope(ns[excess > 0], excess[excess > 0]) if np.sum(excess > 0) >= 3 else float("nan")
    return TotalTimeSummary(ns, T, excess, slope, bool(slope > 1 + 1e-9))


# --------------------------------------------------------------------------- state bounds


def worst_case_constants(bounds: Sequence[ModeBounds], sigma_w: float) -> tuple[float, float]:
    """(kappa*, alpha1*/alpha0*) over all modes."""
    kappa = max(knownlqr.stability_kappa(b, sigma_w) for b in bounds)
    ratio = max(b.alpha1 for b in bounds) / min(b.alpha0 for b in bounds)
    return kappa, ratio


def lemma4_bounds(bounds: Sequence[ModeBounds], alpha_bar: float, sigma_w: float, x0: np.ndarray,
                  kappa: float | None = None, ratio: float | None = None) -> tuple[float, callable]:
    """Uniform state bound X~ and the per-epoch bound k -> X_k."""
    if not 0.0 < alpha_bar < 1.0:
        raise ValidationError("alpha_bar must lie in (0, 1)")
    if kappa is None or ratio is None:
        kappa, ratio = worst_case_constants(bounds, sigma_w)
    eta = 1.0 / kappa**2
    chi = kappa**2 * ratio
    x2 = float(np.dot(x0, x0))
    tail = (2 - alpha_bar) / (1 - alpha_bar) * chi**2 / eta * sigma_w**2
    return kappa**2 * x2 + tail, lambda k: alpha_bar**k * kappa**2 * x2 + tail


@dataclass
class StateBoundReport:
    X_tilde: float
    mean_sq: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    violations: list[int]

    @property
    def ok(self) -> bool:
        return not self.violations


def _stack_ragged(series: list[np.ndarray]):
    T = max(len(s) for s in series)
    buf = np.full((len(series), T), np.nan)
    for r, s in enumerate(series):
        buf[r, : len(s)] = s
    counts = np.sum(~np.isnan(buf), axis=0)
    mean = np.nanmean(buf, axis=0)
    sd = np.array([np.nanstd(buf[:, t], ddof=1) if counts[t] > 1 else 0.0 for t in range(T)])
    return mean, sd / np.sqrt(np.maximum(counts, 1)), counts


def monitor_state_bounds(traces: Sequence[RunTrace], bounds: Sequence[ModeBounds], alpha_bar: float,
                         sigma_w: float, x0: np.ndarray | None = None) -> StateBoundReport:
    """Compare the replicate mean of ||x_t||^2 with the uniform bound at every t."""
    x0 = traces[0].x0 if x0 is None else np.asarray(x0, dtype=float)
    return state_bound_check([np.sum(tr.states**2, axis=1) for tr in traces], bounds, alpha_bar, sigma_w, x0)


def state_bound_check(sq_norms: Sequence[np.ndarray], bounds: Sequence[ModeBounds], alpha_bar: float,
                      sigma_w: float, x0: np.ndarray) -> StateBoundReport:
    """Same check on per-replicate series of ||x_t||^2."""
    X_tilde, _ = lemma4_bounds(bounds, alpha_bar, sigma_w, np.asarray(x0, dtype=float))
    mean, se, counts = _stack_ragged(list(sq_norms))
    bad = [int(t) for t in np.flatnonzero(mean > X_tilde + 3 * se)]
    return StateBoundReport(X_tilde, mean, se, counts, bad)


@dataclass
class SwitchContractionReport:
    mean_post: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    violations: list[int]

    @property
    def ok(self) -> bool:
        return not self.violations


def post_switch_norms(trace: RunTrace) -> np.ndarray:
    """||x||^2 at the first step of every epoch, plus the state after the last epoch."""
    idx = [e.start for e in trace.epochs] + ([trace.T] if trace.epochs else [])
    return np.array([float(trace.states[t] @ trace.states[t]) for t in idx])


def switch_contraction_check(traces: Sequence[RunTrace], factor: float, additive: float) -> SwitchContractionReport:
    """Check mean_{k+1} <= factor * mean_k + additive + 3 SE across replicates.

    The standard error is that of the paired difference ||x_{k+1}||^2 - factor ||x_k||^2.
    """
    return contraction_check([post_switch_norms(tr) for tr in traces], factor, additive)


def contraction_check(series: Sequence[np.ndarray], factor: float, additive: float) -> SwitchContractionReport:
    """Same check on per-replicate post-switch ||x||^2 series."""
    series = list(series)
    K = max(len(s) for s in series)
    mean_post, _, counts = _stack_ragged(series)
    lhs, rhs, se, bad = [], [], [], []
    for k in range(K - 1):
        d = np.array([s[k + 1] - factor * s[k] for s in series if len(s) > k + 1])
        if len(d) < 2:
            break
        m = float(d.mean())
        s = float(d.std(ddof=1) / np.sqrt(len(d)))
        lhs.append(m)
        se.append(s)
        rhs.append(additive + 3 * s)
        if m > additive + 3 * s:
            bad.append(k)
    return SwitchContractionReport(mean_post, np.array(lhs), np.array(rhs), np.array(se), counts, bad)


def contraction_constants(bounds: Sequence[ModeBounds], sigma_w: float) -> tuple[float, float]:
    """Additive terms of the two post-switch checks: beta_bar sigma^2 and kappa*^4 (alpha1*/alpha0*) sigma^2."""
    beta = 0.0
    for b in bounds:
        cert = ofu.stability_params(b, sigma_w)
        beta = max(beta, knownlqr.beta_bar(cert.kappa, cert.gamma, b.alpha0, b.alpha1))
    kappa, ratio = worst_case_constants(bounds, sigma_w)
    return beta * sigma_w**2, kappa**4 * ratio * sigma_w**2
