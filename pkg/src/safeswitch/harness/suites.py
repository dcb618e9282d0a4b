"""Parameterized invariant suites shared by the self-test command and the acceptance tests.

Each routine returns raw metrics; callers decide what counts as a pass.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import knownlqr, ofu, sfsa, sysid
from ..errors import UnstabilizableError
from ..plant import CostMatrices, Mode, ModeBounds, ModeDynamics, NoiseModel, SwitchedPlant, SwitchSequence
from .scenarios import derive_bounds

log = logging.getLogger(__name__)


def random_stabilizable(rng: np.random.Generator, n: int, m: int) -> ModeDynamics:
    while True:
        A = rng.standard_normal((n, n)) / np.sqrt(n)
        B = rng.standard_normal((n, m))
        dyn = ModeDynamics(A, B)
        try:
            knownlqr.solve_dare(dyn, CostMatrices(np.eye(n), np.eye(m)))
        except UnstabilizableError:
            continue
        return dyn


# --------------------------------------------------------------------------- DARE vs SDP


@dataclass
class DareSdpMetrics:
    rel_J: list[float]
    K_err: list[float]
    dims: list[tuple[int, int]]
    seconds: float


def dare_sdp_agreement(count: int, seed: int = 0, max_n: int = 3, max_m: int = 3) -> DareSdpMetrics:
    rng = np.random.default_rng(seed)
    t = time.perf_counter()
    rel, kerr, dims = [], [], []
    for _ in range(count):
        n, m = int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_m + 1))
        dyn = random_stabilizable(rng, n, m)
        costs = CostMatrices(np.eye(n), np.eye(m))
        dare = knownlqr.solve_dare(dyn, costs)
        res = knownlqr.exact_sdp(dyn, costs)
        rel.append(abs(res.J_star - dare.J_star) / dare.J_star)
        kerr.append(float(np.linalg.norm(res.K - dare.K_star, 2)))
        dims.append((n, m))
    return DareSdpMetrics(rel, kerr, dims, time.perf_counter() - t)


# --------------------------------------------------------------------------- coverage


COVERAGE_MODE = ModeDynamics([[0.8, 0.2], [-0.1, 0.7]], [[0.0], [1.0]])


@dataclass
class CoverageMetrics:
    checkpoints: list[int]
    miss_rate: list[float]
    seconds: float


def coverage_rates(replicates: int, checkpoints=(50, 200, 800), delta: float = 0.1, sigma_w: float = 1.0,
                   seed: int = 0, dyn: ModeDynamics = COVERAGE_MODE) -> CoverageMetrics:
    """Miss rate of the prior-centred ellipsoid (prior at zero, exact prior error) at each sample count."""
    t = time.perf_counter()
    n, m = dyn.n, dyn.m
    theta = dyn.theta
    eps = float(np.linalg.norm(theta))
    vartheta = 1.1 * float(np.linalg.norm(theta, 2))
    lam = sigma_w**2 / vartheta**2
    horizon = max(checkpoints)
    misses = np.zeros(len(checkpoints))
    K0 = np.zeros((m, n))
    for rep in range(replicates):
        rng = np.random.default_rng([seed, rep])
        plant = SwitchedPlant([Mode(dyn, CostMatrices(np.eye(n), np.eye(m)), ModeBounds(1, 1, vartheta, 1))],
                              NoiseModel(sigma_w))
        plant.set_mode(0)
        explore = sigma_w * np.sqrt(2.0) * rng.standard_normal((horizon, m))
        tr = plant.simulate_epoch(K0, horizon, rng, explore=explore)
        Z, X = tr.regressors()
        for c, N in enumerate(checkpoints):
            data = sysid.Dataset(n, m)
            data.extend(Z[:N], X[:N])
            conf = sysid.build_confidence_set(data, lam, None, eps, delta, sigma_w)
            misses[c] += not sysid.contains(conf, theta)
    return CoverageMetrics(list(checkpoints), (misses / replicates).tolist(), time.perf_counter() - t)


# --------------------------------------------------------------------------- SFSA scenarios


@dataclass
class ScalarScenario:
    """Two scalar modes plus the learner settings used for the closed-loop suites."""
    modes: list[tuple[float, float]]
    alpha_bar: float = 0.9
    sigma_w: float = 1.0
    T0: int = 100000
    x0: float = 0.0
    zero_radius: bool = False
    sdp_tol: float = 1e-7
    dynamics: list[ModeDynamics] = field(init=False)
    costs: list[CostMatrices] = field(init=False)
    bounds: list[ModeBounds] = field(init=False)

    def __post_init__(self):
        self.dynamics = [ModeDynamics([[a]], [[b]], i) for i, (a, b) in enumerate(self.modes)]
        self.costs = [CostMatrices(np.eye(1), np.eye(1)) for _ in self.modes]
        dares = [knownlqr.solve_dare(d, c, self.sigma_w) for d, c in zip(self.dynamics, self.costs)]
        self.bounds = derive_bounds(self.dynamics, self.costs, dares)

    def plant(self) -> SwitchedPlant:
        return SwitchedPlant([Mode(d, c, b) for d, c, b in zip(self.dynamics, self.costs, self.bounds)],
                             NoiseModel(self.sigma_w), np.array([self.x0]))

    def config(self) -> sfsa.SfsaConfig:
        return sfsa.SfsaConfig(self.costs, self.bounds, self.sigma_w, self.alpha_bar,
                               zero_radius=self.zero_radius, sdp_tol=self.sdp_tol)

    def truth(self) -> sfsa.GroundTruth:
        return sfsa.GroundTruth.from_plant(self.plant(), self.alpha_bar)

    def run(self, ns: int, seed, *, baseline: bool = False) -> sfsa.RunTrace:
        rng = np.random.default_rng(seed)
        plant = self.plant()
        seq = SwitchSequence([k % len(self.modes) for k in range(ns + 1)])
        if baseline:
            return sfsa.run_baseline(plant, seq, self.truth(), rng)
        cfg = self.config()
        K0 = [np.zeros((1, 1)) if abs(a) < 1 else knownlqr.solve_dare(d, c).K_star
              for (a, _), d, c in zip(self.modes, self.dynamics, self.costs)]
        warm = sfsa.warmup(plant, K0, [self.T0] * len(self.modes), cfg, rng)
        learner = sfsa.SfsaLearner.from_warmup(cfg, warm, 1, 1)
        return sfsa.run(plant, seq, learner, rng)


# Mirror pair: same Riccati solution in both modes, benign under alpha_bar = 0.9.
MIRROR = dict(modes=[(0.9, 1.0), (-0.9, -1.0)], T0=100000)
# Slow mirror pair with a demanding contraction factor: dwell times of several steps.
SLOW_MIRROR = dict(modes=[(0.9, 0.5), (-0.9, -0.5)], alpha_bar=1e-3, T0=100000)


def closed_loop_diagnostics(scn: ScalarScenario, ns: int, seed) -> tuple[sfsa.RunTrace, list[sfsa.EpochDiagnostics]]:
    trace = scn.run(ns, seed)
    return trace, sfsa.annotate(trace, scn.truth())


# --------------------------------------------------------------------------- collapse


@dataclass
class CollapseMetrics:
    epochs: int
    K_err: float
    P_err: float
    tau_mismatch: int
    status: str


def collapse_check(scn: ScalarScenario, ns: int, seed) -> CollapseMetrics:
    """With zero radius every epoch must reproduce the Riccati data of the registry centres."""
    trace = scn.run(ns, seed)
    kerr = perr = 0.0
    tau_bad = 0
    for e in trace.epochs:
        dyn_i = ModeDynamics.from_theta(e.conf_i.theta_hat, 1, e.mode)
        dyn_j = ModeDynamics.from_theta(e.conf_j.theta_hat, 1, e.next_mode)
        di = knownlqr.solve_dare(dyn_i, scn.costs[e.mode], scn.sigma_w, tol=1e-13)
        dj = knownlqr.solve_dare(dyn_j, scn.costs[e.next_mode], scn.sigma_w, tol=1e-13)
        kerr = max(kerr, float(np.max(np.abs(e.K - di.K_star))))
        perr = max(perr, float(np.max(np.abs(e.P_i - di.P_star))), float(np.max(np.abs(e.P_j - dj.P_star))))
        tau = knownlqr.dwell_star(di, scn.costs[e.mode], dj, scn.alpha_bar).tau
        tau_bad += tau != e.tau_es
    return CollapseMetrics(trace.ns, kerr, perr, tau_bad, trace.status)


# --------------------------------------------------------------------------- Monte Carlo state checks


@dataclass
class MonteCarloMetrics:
    replicates: int
    completed: int
    contraction: sfsa.SwitchContractionReport
    additive: sfsa.SwitchContractionReport
    state: sfsa.StateBoundReport
    beta_term: float
    additive_term: float
    seconds: float


def state_monte_carlo(scn: ScalarScenario, ns: int, replicates: int, seed: int = 0) -> MonteCarloMetrics:
    t = time.perf_counter()
    traces = []
    for rep in range(replicates):
        tr = scn.run(ns, [seed, rep])
        if tr.status == "complete":
            traces.append(tr)
    beta, add = sfsa.contraction_constants(scn.bounds, scn.sigma_w)
    contraction = sfsa.switch_contraction_check(traces, scn.alpha_bar, beta)
    additive = sfsa.switch_contraction_check(traces, 1.0, add)
    state = sfsa.monitor_state_bounds(traces, scn.bounds, scn.alpha_bar, scn.sigma_w)
    return MonteCarloMetrics(replicates, len(traces), contraction, additive, state, beta, add,
                             time.perf_counter() - t)


# --------------------------------------------------------------------------- regret


@dataclass
class RegretSweep:
    ns: list[int]
    regret: list[list[float]]
    expected_regret: list[list[float]]
    T_es: list[float]
    failures: int
    seconds: float

    @property
    def means(self) -> list[float]:
        return [float(np.mean(r)) if r else float("nan") for r in self.regret]

    @property
    def slope(self) -> float:
        if not all(np.isfinite(m) and m > 0 for m in self.means):
            return float("nan")
        return sfsa.fit_loglog_slope(self.ns, self.means)


def regret_sweep(scn: ScalarScenario, ns_values=(8, 32, 128), replicates: int = 10, seed: int = 0) -> RegretSweep:
    t = time.perf_counter()
    truth = scn.truth()
    regrets, expected, T_es, fails = [], [], [], 0
    for ns in ns_values:
        row, erow, trow = [], [], []
        for rep in range(replicates):
            tr = scn.run(ns, [seed, ns, rep])
            if tr.status != "complete":
                fails += 1
                continue
            row.append(sfsa.regret_report(tr, truth).regret)
            erow.append(sfsa.regret_report(tr, truth, costs=sfsa.expected_cost_series(tr, truth)).regret)
            trow.append(tr.total_time)
        regrets.append(row)
        expected.append(erow)
        T_es.append(float(np.mean(trow)) if trow else float("nan"))
    return RegretSweep(list(ns_values), regrets, expected, T_es, fails, time.perf_counter() - t)


def eta_clamps() -> int:
    return ofu.eta_clamp_warnings
