"""Reduced-size invariant suites behind the ``selftest`` command."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

from .. import ofu
from . import suites as S


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _dare_sdp():
    m = S.dare_sdp_agreement(5, seed=11)
    ok = max(m.rel_J) <= 1e-4 and max(m.K_err) <= 1e-3
    return ok, f"max rel J gap {max(m.rel_J):.2e}, max K gap {max(m.K_err):.2e}"


def _coverage():
    m = S.coverage_rates(40, checkpoints=(50, 200), seed=11)
    ok = max(m.miss_rate) <= 0.25
    return ok, "miss rates " + ", ".join(f"n={c}: {r:.3f}" for c, r in zip(m.checkpoints, m.miss_rate))


def _closed_loop(spec, ns):
    memo = []

    def get():
        if not memo:
            memo.append(S.closed_loop_diagnostics(S.ScalarScenario(**spec), ns, [11, ns]))
        return memo[0]
    return get


def _stability(get):
    def run():
        trace, diags = get()
        covered = [d for d in diags if d.theta_in_ci]
        bad = [d.k for d in covered if not d.strongly_stable]
        ok = trace.status == "complete" and covered and not bad
        return ok, f"{len(covered)}/{len(diags)} covered epochs, {len(bad)} not strongly stable ({trace.status})"
    return run


def _sandwich(get):
    def run():
        trace, diags = get()
        covered = [d for d in diags if d.theta_in_ci]
        worst = min((min(d.sandwich_low, d.sandwich_high) for d in covered), default=float("nan"))
        ok = trace.status == "complete" and covered and worst >= -1e-6
        return ok, f"smallest sandwich eigenvalue {worst:.3e} over {len(covered)} epochs"
    return run


def _dwell():
    trace, diags = S.closed_loop_diagnostics(S.ScalarScenario(**S.SLOW_MIRROR), 8, [11, 8])
    both = [d for d in diags if d.theta_in_ci and d.theta_in_cj]
    bad = [d.k for d in both if not d.dwell_ok]
    gap = max((d.tau_es - d.tau_star for d in both), default=0)
    ok = trace.status == "complete" and both and not bad
    return ok, f"largest tau_es - tau* = {gap}, {len(bad)} epochs above the bound"


def _collapse():
    m = S.collapse_check(S.ScalarScenario(**S.MIRROR, zero_radius=True), 6, [11, 0])
    ok = m.status == "complete" and m.K_err <= 1e-6 and m.P_err <= 1e-6 and m.tau_mismatch == 0
    return ok, f"K gap {m.K_err:.2e}, P gap {m.P_err:.2e}, dwell mismatches {m.tau_mismatch}"


def suites() -> list[tuple[str, Callable]]:
    mirror = _closed_loop(S.MIRROR, 10)
    return [
        ("dare-sdp", _dare_sdp),
        ("coverage", _coverage),
        ("stability", _stability(mirror)),
        ("sandwich", _sandwich(mirror)),
        ("dwell-bound", _dwell),
        ("collapse", _collapse),
    ]


def run_selftest(fault: str | None = None, only: list[str] | None = None) -> list[SuiteResult]:
    """Run every suite; ``fault`` activates a test-only corruption of the synthesis step."""
    guard = ofu.inject_fault(fault) if fault else contextlib.nullcontext()
    out = []
    with guard:
        for name, fn in suites():
            if only and name not in only:
                continue
            t = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing suite is a failing suite
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            out.append(SuiteResult(name, bool(ok), detail, time.perf_counter() - t))
    return out


def format_table(results: list[SuiteResult]) -> str:
    w = max(len(r.name) for r in results) if results else 5
    lines = [f"{'suite':<{w}}  result  time(s)  detail"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
