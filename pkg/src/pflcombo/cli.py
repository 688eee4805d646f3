"""Command line entry point: run, partition, check, report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness.checks import run_checks
from .harness.config import ConfigError, dump_config, parse_config
from .harness.experiment import ExperimentError, partition_manifest_rows, prepare_data, run_experiment
from .harness.report import FORMATS, ReportError, emit_report, read_metrics_csv, render_csv, render_markdown

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pflcombo", description="Personalized federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the full experiment")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, help="output directory (default: output.dir from the config)")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--workers", type=int, help="override the worker count")

    part = sub.add_parser("partition", help="write the client partition as CSV")
    part.add_argument("--config", required=True, type=Path)
    part.add_argument("--manifest", required=True, type=Path)
    part.add_argument("--seed", type=int)

    check = sub.add_parser("check", help="run gradient and aggregator property suites")
    check.add_argument("--trials", type=int, default=100)
    check.add_argument("--seed", type=int, default=0)

    rep = sub.add_parser("report", help="re-render a metrics CSV")
    rep.add_argument("--in", dest="inp", required=True, type=Path)
    rep.add_argument("--format", choices=FORMATS, default="markdown")
    rep.add_argument("--out", type=Path, help="write here instead of stdout")
    return p


def _load(args):
    cfg = parse_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    out = args.out or Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    table = run_experiment(cfg)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    suffix = {"csv": "csv", "markdown": "md"}
    for fmt in cfg.output.formats:
        path = emit_report(table, fmt, out / f"metrics.{suffix[fmt]}")
        print(path)
    return EXIT_OK


def _cmd_partition(args) -> int:
    cfg = _load(args)
    rows = partition_manifest_rows(prepare_data(cfg))
    args.manifest.parent.mkdir(parents=True, exist_ok=True)
    with open(args.manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "split", "row_index"])
        w.writerows(rows)
    print(args.manifest)
    return EXIT_OK


def _cmd_check(args) -> int:
    if args.trials < 1:
        raise UsageError("check: --trials must be >= 1")
    results = run_checks(args.trials, args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" ({r.detail})" if r.detail else ""
        print(f"{status} {r.name}: {r.trials - r.failures}/{r.trials}{extra}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _cmd_report(args) -> int:
    table = read_metrics_csv(args.inp)
    if args.out:
        print(emit_report(table, args.format, args.out))
    else:
        if not table.records:
            raise ReportError("cannot render an empty metrics table (no approaches)")
        sys.stdout.write(render_csv(table) if args.format == "csv" else render_markdown(table))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "partition": _cmd_partition, "check": _cmd_check, "report": _cmd_report}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ExperimentError, ReportError, OSError, ValueError) as e:
        print(f"pflcombo {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
