"""Command-line entry point: ``ioncav <subcommand> --config FILE --out DIR [--seed N]``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 comparison
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..budget import InconsistentInputsError, budget_report
from .compare import SchemaError, compare
from .config import EXPERIMENTS, ConfigError, load_config
from .runner import NumericalError, run

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_COMPARISON = 0, 1, 2, 3

log = logging.getLogger("ioncav")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ioncav", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} protocol")
        p.add_argument("--config", type=Path, help="JSON config layered over the defaults")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="base seed (overrides base_seed)")
        p.add_argument("--trajectories", type=int, help="override n_trajectories")
        p.add_argument("--golden", type=Path, help="compare the results with this golden file")
    p = sub.add_parser("budget", help="print the closed-form budget report as JSON")
    p.add_argument("--config", type=Path)
    p = sub.add_parser("compare", help="compare result files with a golden file")
    p.add_argument("results", nargs="+", type=Path,
                   help="result JSON files or run directories")
    p.add_argument("--golden", type=Path, required=True)
    return ap


def _result_files(paths) -> list[Path]:
    files = []
    for p in paths:
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    return files


def _compare(results, golden) -> int:
    report = compare(_result_files(results), golden)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_COMPARISON


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return _compare(args.results, args.golden)
        if args.command == "budget":
            cfg = load_config(args.config, experiment="budget_report", output_dir=".")
            report = budget_report(cfg.cavity, cfg.budget_inputs, cfg.branching)
            json.dump(report, sys.stdout, indent=2, sort_keys=True)
            sys.stdout.write("\n")
            return EXIT_OK
        cfg = load_config(args.config, experiment=args.command, base_seed=args.seed,
                          output_dir=args.out, n_trajectories=args.trajectories)
        log.info("running %s with base_seed %d into %s", cfg.experiment, cfg.base_seed,
                 cfg.output_dir)
        manifest, paths = run(cfg)
        for name in sorted(paths):
            print(paths[name])
        print(json.dumps(manifest.summary, sort_keys=True))
        if args.golden is not None:
            return _compare(list(paths.values()) + [Path(cfg.output_dir) / f"{cfg.experiment}"
                                                    ".manifest.json"], args.golden)
        return EXIT_OK
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, InconsistentInputsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
