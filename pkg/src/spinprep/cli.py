"""Command line entry point: ``spinprep run|verify|plotdata``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .control import NumericalError
from .experiments import (
    KINDS,
    ConfigError,
    emit_plot_data,
    load_config,
    output_dir,
    preset_names,
    read_results,
    run_experiment,
    scale_up,
    verify,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spinprep", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config or a named preset")
    run.add_argument("config", help=f"config file or preset ({', '.join(preset_names())})")
    run.add_argument("--seed", type=int, help="replace the config's seed list by this single seed")
    run.add_argument("--threads", type=int, default=1, help="worker processes across independent runs")
    run.add_argument("--full", action="store_true", help="full-scale chains (N=10); takes hours")
    run.add_argument("--out", help="output directory (overrides config and $SPINPREP_OUT)")
    run.add_argument("--no-plot", action="store_true", help="skip writing plot tables")

    ver = sub.add_parser("verify", help="recompute a random record of a results file")
    ver.add_argument("results", help="results.csv or its directory")
    ver.add_argument("--seed", type=int, default=0, help="selects which record is recomputed")

    plot = sub.add_parser("plotdata", help="write figure tables from a results file")
    plot.add_argument("results", help="results.csv or its directory")
    plot.add_argument("--kind", choices=KINDS, help="defaults to the experiment's kind")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.full:
                cfg = scale_up(cfg)
            if args.seed is not None:
                cfg = replace(cfg, seeds=[args.seed])
            records = run_experiment(cfg, threads=args.threads, out=args.out)
            out = output_dir(cfg, args.out)
            print(f"{len(records)} records written to {out}")
            if not args.no_plot:
                for path in emit_plot_data(records, cfg.kind, out):
                    print(f"plot data: {path}")
        elif args.command == "verify":
            ok, record, fresh = verify(args.results, seed=args.seed)
            status = "OK" if ok else "MISMATCH"
            print(f"{status} {record.config_hash} stored f={record.fidelity!r} recomputed f={fresh!r}")
            return EXIT_OK if ok else EXIT_FAIL
        else:
            cfg, records = read_results(args.results)
            results_dir = Path(args.results)
            results_dir = results_dir if results_dir.is_dir() else results_dir.parent
            for path in emit_plot_data(records, args.kind or cfg.kind, results_dir):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
