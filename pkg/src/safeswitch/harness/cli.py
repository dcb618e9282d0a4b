"""Command line entry point: ``safeswitch <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import SafeSwitchError
from .config import json_schema, load_config
from .runner import OUTPUT_ROOT_ENV, plot_summary, run_experiment
from .selftest import format_table, run_selftest


def _experiment(args, *, baseline=False, sweep=False) -> int:
    config = load_config(args.config).with_seed(args.seed)
    out = Path(args.out) if args.out else None
    bundle = run_experiment(config, baseline=baseline, out_dir=out, require_sweep=sweep)
    for p in bundle.summary["per_ns"]:
        mean = p["regret_mean"]
        lo, hi = p["regret_ci95"]
        txt = "n/a" if mean is None else f"{mean:.4g} [{lo:.4g}, {hi:.4g}]" if lo is not None else f"{mean:.4g}"
        print(f"ns={p['ns']:<5d} completed {p['completed']}/{p['replicates']}  regret {txt}")
    if bundle.summary.get("regret_slope") is not None:
        print(f"log-log regret slope: {bundle.summary['regret_slope']:.3f}")
    print(f"summary: {bundle.summary_path}")
    return 1 if bundle.all_failed else 0


def cmd_simulate(args) -> int:
    return _experiment(args)


def cmd_baseline(args) -> int:
    return _experiment(args, baseline=True)


def cmd_sweep(args) -> int:
    return _experiment(args, sweep=True)


def cmd_selftest(args) -> int:
    results = run_selftest(fault=args.inject_fault, only=args.only)
    print(format_table(results))
    return 0 if results and all(r.passed for r in results) else 1


def cmd_plot(args) -> int:
    for p in plot_summary(args.summary):
        print(p)
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(json_schema(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safeswitch", description=(
        "Safe switching for switched LQR systems with unknown dynamics. "
        f"Outputs go under ${OUTPUT_ROOT_ENV} (default: current directory)."))
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    def experiment(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config's base seed")
        p.add_argument("--out", default=None, help="output directory (overrides the output root)")
        p.set_defaults(func=fn)

    experiment("simulate", cmd_simulate, "warm-up plus SFSA for every ns and replicate")
    experiment("baseline", cmd_baseline, "known-parameter strategy only")
    experiment("regret-sweep", cmd_sweep, "SFSA over an ns sweep with a growth fit (needs 3+ ns values)")

    p = sub.add_parser("selftest", help="reduced invariant suites")
    p.add_argument("--only", nargs="*", default=None, help="run only these suites")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("plot", help="render SVG charts from a summary JSON")
    p.add_argument("--summary", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("schema", help="print the experiment config JSON schema")
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SafeSwitchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
