"""Command-line entry point.

    flguard run --config PATH [--seed N] [--out DIR]
    flguard sweep --config PATH --axis NAME --values CSV [--out DIR]
    flguard report --in DIR --out DIR
    flguard selftest

Failures print one JSON line ``{"error": kind, "message": ...}`` (plus
``"key"`` for configuration errors) on stderr and exit nonzero.
``FLGUARD_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .harness import SWEEP_AXES, find_runs, load_archive, report, run_experiment, sweep

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUN = 4
EXIT_SELFTEST = 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int, key: str | None = None):
        super().__init__(message)
        self.kind, self.code, self.key = kind, code, key

    def line(self) -> str:
        body = {"error": self.kind, "message": str(self)}
        if self.key is not None:
            body["key"] = self.key
        return json.dumps(body, sort_keys=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _load(path: str):
    try:
        return load_config(path)
    except FileNotFoundError:
        raise CliError("io", f"config file not found: {path}", EXIT_CONFIG) from None
    except ConfigError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG, exc.key) from None


def _parse_values(axis: str, text: str) -> list:
    out = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            raise CliError("usage", "empty entry in --values", EXIT_USAGE)
        try:
            out.append(int(item) if axis in ("n_malicious", "layers") else float(item))
        except ValueError:
            raise CliError("usage", f"--values entry {item!r} is not a number", EXIT_USAGE) from None
    return out


def cmd_run(args) -> int:
    config = _load(args.config)
    if args.seed is not None:
        config = config.with_values(seed=args.seed)
    out = Path(args.out or config.out)
    try:
        archive = run_experiment(config, out)
    except Exception as exc:
        raise CliError("run", f"{type(exc).__name__}: {exc}", EXIT_RUN) from None
    print(json.dumps({"out": str(out), **archive.summary}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    config = _load(args.config)
    values = _parse_values(args.axis, args.values)
    out = Path(args.out or config.out)
    archives = sweep(config, args.axis, values, out)
    sys.stdout.write(report(archives, out))
    return 0 if not all(a.failed for a in archives) else EXIT_RUN


def cmd_report(args) -> int:
    runs = find_runs(args.in_dir)
    if not runs:
        raise CliError("io", f"no runs found under {args.in_dir}", EXIT_RUN)
    try:
        archives = [load_archive(p) for p in runs]
    except ConfigError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG, exc.key) from None
    except (OSError, ValueError) as exc:
        raise CliError("io", str(exc), EXIT_RUN) from None
    sys.stdout.write(report(archives, args.out))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise CliError("selftest", f"failed checks: {', '.join(failed)}", EXIT_SELFTEST)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flguard", description="Desk-scale federated learning with a two-stage poisoning defense.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="one run per value of an axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    rep = sub.add_parser("report", help="summarize the runs under a directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)

    t = sub.add_parser("selftest", help="run the built-in invariant checks")
    t.set_defaults(fn=cmd_selftest)
    return p


def _setup_logging() -> None:
    level = os.environ.get("FLGUARD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
