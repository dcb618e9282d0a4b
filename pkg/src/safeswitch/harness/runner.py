"""Monte Carlo execution of configured experiments and their file outputs."""
from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .. import __version__, sfsa, sysid
from ..errors import SafeSwitchError, ValidationError
from ..plant import SwitchSequence
from . import svg
from .config import ExperimentConfig, SequenceSpec
from .scenarios import Scenario, generate_scenario

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SAFESWITCH_OUTPUT_ROOT"
SCENARIO_STREAM = 7919


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")


def version_string() -> str:
    """git-describe style version; falls back to the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    desc = out.stdout.strip()
    if out.returncode != 0 or not desc:
        return f"v{__version__}"
    if desc.startswith("v") or "-g" in desc:
        return desc
    return f"v{__version__}-0-g{desc}"


def build_scenario(config: ExperimentConfig) -> Scenario:
    rng = np.random.default_rng([config.scenario_seed, SCENARIO_STREAM])
    return generate_scenario(config.scenario, rng, config.sigma_w)


def make_sequence(spec: SequenceSpec, ns: int, n_modes: int, seed: list[int]) -> SwitchSequence:
    """ns switches means ns epochs, i.e. ns + 1 reveals (scripted sequences ignore ns)."""
    if spec.kind == "alternate":
        return SwitchSequence([k % n_modes for k in range(ns + 1)])
    if spec.kind == "scripted":
        bad = [s for s in spec.script if not 0 <= s < n_modes]
        if bad:
            raise ValidationError(f"script refers to unknown modes {bad}")
        return SwitchSequence(spec.script)
    if spec.kind == "random":
        return SwitchSequence(n_modes=n_modes, n_switches=ns, seed=seed)
    return SwitchSequence(n_modes=n_modes, stop_prob=spec.stop_prob, seed=seed)


def sfsa_config(config: ExperimentConfig, scenario: Scenario, debug_dir=None) -> sfsa.SfsaConfig:
    a = config.algorithm
    return sfsa.SfsaConfig(scenario.costs, scenario.bounds, config.sigma_w, config.alpha_bar,
                           delta=config.delta, union_bound=a.union_bound,
                           reuse_warmup_data=a.reuse_warmup_data, zero_radius=a.zero_radius,
                           enforce_precondition=a.enforce_precondition,
                           lambda_iterations=a.lambda_iterations, sdp_tol=a.sdp_tol, debug_dir=debug_dir)


def warmup_gains(config: ExperimentConfig, scenario: Scenario) -> list[np.ndarray]:
    K0 = config.warmup.K0
    if isinstance(K0, str):
        return scenario.default_gains(K0)
    if len(K0) != scenario.n_modes:
        raise ValidationError("need one warm-up gain per mode")
    return [np.asarray(k, dtype=float) for k in K0]


def warmup_lengths(config: ExperimentConfig, n_modes: int) -> list[int]:
    T0 = config.warmup.T0
    T0 = [T0] * n_modes if isinstance(T0, int) else list(T0)
    if len(T0) != n_modes:
        raise ValidationError("need one warm-up length per mode")
    return T0


# --------------------------------------------------------------------------- traces


def step_regret(trace: sfsa.RunTrace, truth: sfsa.GroundTruth) -> np.ndarray:
    """Per-step regret increments whose running sum ends at the epoch-level regret.

    Inside the benchmark dwell the increment is c_t - J*; overhang steps count in
    full; an epoch cut short of the benchmark pays the missing tau* J* at its last step.
    """
    inc = np.array(trace.costs, dtype=float)
    for e in trace.epochs:
        ts = int(truth.tau_star[e.mode, e.next_mode])
        J = truth.j_star(e.mode)
        stop = e.start + min(ts, e.tau_es)
        inc[e.start:stop] -= J
        if e.tau_es < ts:
            inc[e.start + e.tau_es - 1] -= (ts - e.tau_es) * J
    return inc


def trace_rows(trace: sfsa.RunTrace, truth: sfsa.GroundTruth | None):
    n = trace.states.shape[1]
    m = trace.inputs.shape[1] if trace.T else 0
    yield (["t", "mode", "epoch"] + [f"x{k}" for k in range(n)] + [f"u{k}" for k in range(m)]
           + ["cost", "tau_es", "cum_regret"])
    if not trace.T:
        return
    cum = np.cumsum(step_regret(trace, truth)) if truth is not None else np.full(trace.T, np.nan)
    for t in range(trace.T):
        k = int(trace.epoch_index[t])
        yield ([t, int(trace.modes[t]), k] + [repr(float(v)) for v in trace.states[t]]
               + [repr(float(v)) for v in trace.inputs[t]]
               + [repr(float(trace.costs[t])), trace.epochs[k].tau_es, repr(float(cum[t]))])


def write_trace_csv(path, trace: sfsa.RunTrace, truth: sfsa.GroundTruth | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in trace_rows(trace, truth):
            w.writerow(row)


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [() for _ in header]
    return {h: np.array([float(v) for v in c]) for h, c in zip(header, cols)}


# --------------------------------------------------------------------------- replicates


@dataclass
class ReplicateResult:
    ns: int
    rep: int
    seed: list[int]
    status: str
    error: str | None = None
    epochs: int = 0
    regret: float = float("nan")
    expected_regret: float = float("nan")
    R1: float = float("nan")
    R2: float = float("nan")
    J_alg: float = float("nan")
    T_es: int = 0
    T_star: int = 0
    clipped: int = 0
    in_mode: int = 0
    in_both: int = 0
    stability_fail: int = 0
    sandwich_fail: int = 0
    dwell_fail: int = 0
    lambda_failures: int = 0
    sq_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    post_switch: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace_csv: str | None = None


def _tag(ns: int, rep: int) -> str:
    return f"ns{ns:04d}_rep{rep:03d}"


def run_replicate(config: ExperimentConfig, ns: int, rep: int, *, baseline: bool = False,
                  out_dir: Path | None = None, scenario: Scenario | None = None) -> ReplicateResult:
    """One warm-up plus one pass over a freshly drawn switch sequence."""
    scenario = build_scenario(config) if scenario is None else scenario
    seed = [config.seed, ns, rep]
    res = ReplicateResult(ns, rep, seed, "complete")
    rng = np.random.default_rng(seed)
    plant = scenario.plant(config.sigma_w, config.noise, config.x0)
    truth = sfsa.GroundTruth.from_plant(plant, config.alpha_bar)
    seq = make_sequence(config.sequence, ns, scenario.n_modes, seed)
    debug_dir = None
    if out_dir is not None and config.output.sdp_debug and not baseline:
        debug_dir = out_dir / "sdp" / _tag(ns, rep)
        debug_dir.mkdir(parents=True, exist_ok=True)
    learner = None
    try:
        if baseline:
            trace = sfsa.run_baseline(plant, seq, truth, rng)
        else:
            cfg = sfsa_config(config, scenario, str(debug_dir) if debug_dir else None)
            warm = sfsa.warmup(plant, warmup_gains(config, scenario),
                               warmup_lengths(config, scenario.n_modes), cfg, rng,
                               kappa0=[config.warmup.kappa0] * scenario.n_modes)
            learner = sfsa.SfsaLearner.from_warmup(cfg, warm, scenario.n, scenario.m)
            trace = sfsa.run(plant, seq, learner, rng)
    except SafeSwitchError as exc:
        res.status, res.error = "failed", f"{type(exc).__name__}: {exc}"
        return res
    res.status, res.error = trace.status, trace.error
    trace.seeds = {"replicate": seed}
    rep_ = sfsa.regret_report(trace, truth)
    res.epochs, res.regret, res.R1, res.R2 = trace.ns, rep_.regret, rep_.R1, rep_.R2
    res.J_alg, res.T_es, res.T_star, res.clipped = rep_.J_alg, rep_.T_es, rep_.T_star, rep_.clipped_epochs
    res.expected_regret = sfsa.regret_report(trace, truth, costs=sfsa.expected_cost_series(trace, truth)).regret
    res.sq_norms = np.sum(trace.states**2, axis=1)
    res.post_switch = sfsa.post_switch_norms(trace)
    if learner is not None:
        res.lambda_failures = learner.lambda_failures
        for d in sfsa.annotate(trace, truth):
            res.in_mode += d.theta_in_ci
            both = d.theta_in_ci and d.theta_in_cj
            res.in_both += both
            if d.theta_in_ci:
                res.stability_fail += not d.strongly_stable
                res.sandwich_fail += min(d.sandwich_low, d.sandwich_high) < -1e-6
            if both:
                res.dwell_fail += not d.dwell_ok
    if out_dir is not None:
        if config.output.traces:
            path = out_dir / "traces" / f"{_tag(ns, rep)}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_trace_csv(path, trace, truth)
            res.trace_csv = str(path.relative_to(out_dir))
        if config.output.datasets and learner is not None:
            path = out_dir / "datasets" / f"{_tag(ns, rep)}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            sysid.write_datasets_csv(path, [learner.datasets[i] for i in sorted(learner.datasets)])
    return res


def _job(args):
    cfg_json, ns, rep, baseline, out_dir = args
    config = ExperimentConfig.model_validate_json(cfg_json)
    return run_replicate(config, ns, rep, baseline=baseline, out_dir=Path(out_dir) if out_dir else None)


# --------------------------------------------------------------------------- aggregation


def _ci(values: np.ndarray, level: float = 0.95) -> tuple[float, float, float]:
    v = values[np.isfinite(values)]
    if len(v) == 0:
        return float("nan"), float("nan"), float("nan")
    mean = float(v.mean())
    if len(v) < 2:
        return mean, mean, mean
    half = float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / np.sqrt(len(v)))
    return mean, mean - half, mean + half


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def summarize_ns(results: list[ReplicateResult], config: ExperimentConfig, scenario: Scenario) -> dict:
    ok = [r for r in results if r.status == "complete"]
    regret = np.array([r.regret for r in ok])
    mean, lo, hi = _ci(regret)
    epochs = sum(r.epochs for r in ok)
    both = sum(r.in_both for r in ok)
    out = {
        "ns": results[0].ns,
        "replicates": len(results),
        "completed": len(ok),
        "failed": [{"rep": r.rep, "status": r.status, "error": r.error} for r in results if r.status != "complete"],
        "regret_mean": _num(mean),
        "regret_ci95": [_num(lo), _num(hi)],
        "expected_regret_mean": _num(np.mean([r.expected_regret for r in ok])) if ok else None,
        "R1_mean": _num(np.mean([r.R1 for r in ok])) if ok else None,
        "R2_mean": _num(np.mean([r.R2 for r in ok])) if ok else None,
        "T_es_mean": _num(np.mean([r.T_es for r in ok])) if ok else None,
        "T_star_mean": _num(np.mean([r.T_star for r in ok])) if ok else None,
        "clipped_epochs": sum(r.clipped for r in ok),
        "coverage": {
            "epochs": epochs,
            "mode_rate": _num(sum(r.in_mode for r in ok) / epochs) if epochs else None,
            "both_rate": _num(both / epochs) if epochs else None,
        },
        "violations": {
            "strong_stability": sum(r.stability_fail for r in ok),
            "sandwich": sum(r.sandwich_fail for r in ok),
            "dwell_bound": sum(r.dwell_fail for r in ok),
        },
        "lambda_failures": sum(r.lambda_failures for r in ok),
    }
    if len(ok) >= 2:
        beta, additive = sfsa.contraction_constants(scenario.bounds, config.sigma_w)
        out["violations"]["state_bound"] = len(sfsa.state_bound_check(
            [r.sq_norms for r in ok], scenario.bounds, config.alpha_bar, config.sigma_w,
            np.zeros(scenario.n) if config.x0 is None else np.asarray(config.x0)).violations)
        out["violations"]["switch_contraction"] = len(sfsa.contraction_check(
            [r.post_switch for r in ok], config.alpha_bar, beta).violations)
        out["violations"]["switch_additive"] = len(sfsa.contraction_check(
            [r.post_switch for r in ok], 1.0, additive).violations)
    return out


@dataclass
class OutputBundle:
    out_dir: Path
    summary_path: Path
    summary: dict
    traces: list[Path]
    charts: list[Path]
    results: list[ReplicateResult]

    @property
    def all_failed(self) -> bool:
        return bool(self.results) and all(r.status != "complete" for r in self.results)


def _scenario_dict(scenario: Scenario, truth_tau) -> dict:
    return {
        "modes": [{"A": d.A.tolist(), "B": d.B.tolist(), "Q": c.Q.tolist(), "R": c.R.tolist()}
                  for d, c in zip(scenario.dynamics, scenario.costs)],
        "bounds": [{"alpha0": b.alpha0, "alpha1": b.alpha1, "vartheta": b.vartheta, "nu": b.nu}
                   for b in scenario.bounds],
        "J_star": [s.J_star for s in scenario.dares],
        "tau_star": np.asarray(truth_tau).tolist(),
    }


def run_experiment(config: ExperimentConfig, *, baseline: bool = False, out_dir: Path | None = None,
                   require_sweep: bool = False) -> OutputBundle:
    """Run every (ns, replicate) pair, write traces, summary JSON and charts."""
    if require_sweep and len(set(config.ns)) < 3:
        raise ValidationError("a regret sweep needs at least three distinct ns values")
    scenario = build_scenario(config)
    out_dir = Path(out_dir) if out_dir is not None else output_root() / config.output.dir / config.name
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    jobs = [(ns, rep) for ns in config.ns for rep in range(config.replicates)]
    if config.workers > 1 and len(jobs) > 1:
        payload = config.model_dump_json()
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_job, [(payload, ns, rep, baseline, str(out_dir)) for ns, rep in jobs]))
    else:
        results = [run_replicate(config, ns, rep, baseline=baseline, out_dir=out_dir, scenario=scenario)
                   for ns, rep in jobs]
    truth = sfsa.GroundTruth.from_plant(scenario.plant(config.sigma_w, config.noise, config.x0),
                                        config.alpha_bar)
    per_ns = [summarize_ns([r for r in results if r.ns == ns], config, scenario)
              for ns in dict.fromkeys(config.ns)]
    summary = {
        "name": config.name,
        "kind": "baseline" if baseline else "sfsa",
        "version": version_string(),
        "config": config.model_dump(mode="json"),
        "seeds": {"base": config.seed, "scenario": config.scenario_seed,
                  "replicates": [r.seed for r in results]},
        "scenario": _scenario_dict(scenario, truth.tau_star),
        "per_ns": per_ns,
        "regret_slope": None,
        "total_time": None,
        "files": {"traces": [r.trace_csv for r in results if r.trace_csv], "charts": []},
    }
    ns_vals = [p["ns"] for p in per_ns if p["regret_mean"] is not None]
    means = [p["regret_mean"] for p in per_ns if p["regret_mean"] is not None]
    if len(set(ns_vals)) >= 3 and all(v > 0 for v in means) and all(n > 0 for n in ns_vals):
        summary["regret_slope"] = sfsa.fit_loglog_slope(ns_vals, means)
    if len(set(ns_vals)) >= 3:
        tts = sfsa.total_time_summary(ns_vals, [p["T_es_mean"] for p in per_ns if p["regret_mean"] is not None])
        summary["total_time"] = {"excess": tts.excess.tolist(), "slope": _num(tts.slope), "flagged": tts.flagged}
    summary_path = out_dir / "summary.json"
    charts = render_charts(summary, out_dir) if config.output.svg else []
    summary["files"]["charts"] = [str(p.relative_to(out_dir)) for p in charts]
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    traces = [out_dir / r.trace_csv for r in results if r.trace_csv]
    return OutputBundle(out_dir, summary_path, summary, traces, charts, results)


# --------------------------------------------------------------------------- charts


def render_charts(summary: dict, out_dir: Path) -> list[Path]:
    """Regret vs ns (with 95% intervals) and ||x_t|| of the first stored trace."""
    out_dir = Path(out_dir)
    charts = []
    pts = [p for p in summary["per_ns"] if p["regret_mean"] is not None]
    if pts:
        ns = [p["ns"] for p in pts]
        mean = [p["regret_mean"] for p in pts]
        half = [(p["regret_ci95"][1] - p["regret_ci95"][0]) / 2 if p["regret_ci95"][1] is not None else 0.0
                for p in pts]
        path = out_dir / "regret_vs_ns.svg"
        svg.write_chart(path, {"mean regret": (ns, mean)}, errors={"mean regret": half},
                        title=f"{summary['name']}: regret", xlabel="ns", ylabel="regret",
                        logx=all(n > 0 for n in ns))
        charts.append(path)
    traces = summary["files"].get("traces") or []
    if traces and (out_dir / traces[-1]).exists():
        cols = read_trace_csv(out_dir / traces[-1])
        xs = sorted(k for k in cols if k.startswith("x"))
        if len(cols["t"]):
            norm = np.sqrt(sum(cols[k] ** 2 for k in xs))
            path = out_dir / "state_norm.svg"
            svg.write_chart(path, {"||x_t||": (cols["t"], norm)}, title=f"{summary['name']}: {traces[-1]}",
                            xlabel="t", ylabel="||x||")
            charts.append(path)
    return charts


def plot_summary(summary_path) -> list[Path]:
    summary_path = Path(summary_path)
    summary = json.loads(summary_path.read_text())
    return render_charts(summary, summary_path.parent)
