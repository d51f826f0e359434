"""Command-line harness: ``fusecoll verify | bench | model``.

Exit codes: 0 on success, 1 when a verification check fails, 2 on usage errors.
Experiment settings come from flags, optionally layered over a plain
``key=value`` config file; flags win.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from typing import IO, Iterator, Sequence

from . import costmodel
from .collectives import ScheduleKind
from .errors import UnsupportedConfigError
from .experiments import (
    BENCH_FIELDS,
    LAYERS,
    STRATEGIES,
    ConfigError,
    ExperimentConfig,
    bench,
    verify,
)

log = logging.getLogger("fusecoll")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# Config keys and how to parse them from text.
_CONVERT = {
    "tp_size": int,
    "batch": int,
    "seq": int,
    "d_model": int,
    "heads": int,
    "granularity": int,
    "schedule": str,
    "layer": str,
    "seed": int,
    "delay_ms": float,
    "delay_ratio": float,
    "reps": int,
    "chunks": int,
}


class CommandError(Exception):
    """Bad flags, config file or grid; reported on stderr with exit code 2."""


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are skipped;
    dashes in keys are accepted as underscores."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CommandError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONVERT:
            raise CommandError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _CONVERT[key](value)
        except ValueError:
            raise CommandError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in _CONVERT:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        return ExperimentConfig(**values).validate()
    except ConfigError as exc:
        raise CommandError(f"invalid configuration: {exc}") from None


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[IO[str]]:
    if path is None or path == "-":
        yield sys.stdout
        return
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror}") from None
    with fh:
        yield fh


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    report = verify(cfg, corrupt=args.inject_fault)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown or not strategies:
        raise CommandError(f"--strategies must be a subset of {','.join(STRATEGIES)}")
    report = bench(cfg, strategies)
    log.info("per-chunk compute %.3f ms, injected delay %.3f ms", report.chunk_compute_ms, report.delay_ms)
    with _output(args.out) as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(report.rows())
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_model(args: argparse.Namespace) -> int:
    try:
        reports = costmodel.model_grid(args.n, args.c, args.d, args.chunks, include_fit=not args.no_fit)
    except ValueError as exc:
        raise CommandError(f"invalid cost-model grid: {exc}") from None
    with _output(args.out) as fh:
        costmodel.write_csv(reports, fh)
    return EXIT_OK


def _experiment_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="key=value file; flags override its entries")
    g.add_argument("--tp-size", dest="tp_size", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--seq", type=int)
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--granularity", type=int, help="chunks per rank slice (m)")
    g.add_argument("--schedule", choices=[k.value for k in ScheduleKind])
    g.add_argument("--layer", choices=LAYERS)
    g.add_argument("--seed", type=int)
    g.add_argument("--reps", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusecoll", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _experiment_flags()

    v = sub.add_parser("verify", parents=[common], help="check fused layers against oracles")
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", parents=[common], help="wall-clock strategies on the threaded fabric")
    b.add_argument("--delay-ms", dest="delay_ms", type=float, help="transfer time of one chunk-sized message")
    b.add_argument(
        "--delay-ratio", dest="delay_ratio", type=float, help="delay as a multiple of measured per-chunk compute"
    )
    b.add_argument("--chunks", type=int, help="pieces for the data-slicing strategy")
    b.add_argument("--strategies", default=",".join(STRATEGIES))
    b.add_argument("--out", help="CSV path (default: stdout)")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("model", help="analytic cost-model table as CSV")
    m.add_argument("--n", type=_ints, default=[2, 4, 8])
    m.add_argument("--c", type=_floats, default=[1.0])
    m.add_argument("--d", type=_floats, default=[0.0, 0.25, 0.5, 1.0, 2.0])
    m.add_argument("--chunks", type=_ints, default=[1, 4, 6, 8])
    m.add_argument("--no-fit", action="store_true", help="omit the row fitted to the measured n=4 MLP")
    m.add_argument("--out", help="CSV path (default: stdout)")
    m.set_defaults(func=cmd_model)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, UnsupportedConfigError) as exc:
        print(f"fusecoll: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
