"""``csmc`` command-line interface.

Usage::

    csmc run      [EXPERIMENT] [--config PATH] [--seed U64] [--out DIR] [--threads N] [--method NAME]
                  [--set KEY=VALUE ...] [--KEY VALUE ...]
    csmc pilots   ...same options...          -> pilots.csv, summary.json
    csmc heatmap  ... --estimators PATH [--times 0,10,20] [--grid LO:HI:POINTS]
    csmc bench    ...same options...          -> bench.csv (and mse.csv)
    csmc validate ...same options...          -> prints the resolved config

Any ``--KEY VALUE`` not listed above overrides ``params.KEY`` (a JSON
value, or a bare string).  Exit status: 0 success, 1 configuration error,
2 run failure, 3 I/O error.  ``CSMC_LOG`` sets the log level (e.g. ``INFO``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from csmc.cli import runners
from csmc.cli.config import (
    PARAM_TYPES,
    apply_overrides,
    decode_value,
    dumps_config,
    parse_config,
)
from csmc.cli.io import write_outputs
from csmc.errors import ConfigurationError, CsmcError

log = logging.getLogger("csmc.cli")

COMMANDS = ("run", "pilots", "heatmap", "bench", "validate")
EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_IO = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, which means "run failure" here
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csmc", description="Constrained sequential Monte Carlo experiments.", allow_abbrev=False)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("experiment", nargs="?", choices=sorted(PARAM_TYPES))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", help="master seed, 0 .. 2**64-1")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", default="1", help="worker threads (never changes results)")
    parser.add_argument("--method", help="method name for the experiment")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="parameter override")
    parser.add_argument("--estimators", help="heatmap: estimator file written by 'pilots'")
    parser.add_argument("--times", help="heatmap: comma-separated times (default: every estimated time)")
    parser.add_argument("--grid", default="-10:10:201", help="heatmap: LO:HI:POINTS")
    return parser


def _extra_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigurationError(f"params.{key}: missing value for --{key}")
        out[key.replace("-", "_")] = decode_value(value)
    return out


def resolve_config(args, extra: list[str]):
    """Merge file, positional experiment, flags and overrides into a RunConfig."""
    data: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config: invalid JSON in {args.config} ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError("config: top level must be a JSON object")
    if args.experiment:
        if data.get("experiment") not in (None, args.experiment):
            raise ConfigurationError(
                f"experiment: command line says {args.experiment!r} but the config says {data['experiment']!r}"
            )
        data["experiment"] = args.experiment
    if args.method:
        data["method"] = args.method
    if args.seed is not None:
        try:
            data["seed"] = int(args.seed)
        except ValueError:
            raise ConfigurationError(f"seed: expected an unsigned 64-bit integer, got {args.seed!r}") from None
    if args.out:
        data["out"] = args.out
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.removeprefix("params.")] = decode_value(value)
    overrides.update(_extra_overrides(extra))
    if overrides:
        data = apply_overrides(data, overrides)
    if "experiment" not in data:
        raise ConfigurationError("experiment: not given (positional argument or config key)")
    return parse_config(data)


def _threads(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigurationError(f"threads: expected a positive integer, got {text!r}")
    return n


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, pts = text.split(":")
        lo, hi, pts = float(lo), float(hi), int(pts)
    except ValueError:
        raise ConfigurationError(f"grid: expected LO:HI:POINTS, got {text!r}") from None
    if not (hi > lo and pts >= 2):
        raise ConfigurationError(f"grid: need HI > LO and POINTS >= 2, got {text!r}")
    return np.linspace(lo, hi, pts)


def _parse_times(text: str | None, default) -> list[int]:
    if text is None:
        return sorted(int(t) for t in default)
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"times: expected comma-separated integers, got {text!r}") from None


def _setup_logging():
    level = os.environ.get("CSMC_LOG", "WARNING").upper()
    value = getattr(logging, level, None) if not level.isdigit() else int(level)
    if not isinstance(value, int):
        value = logging.WARNING
    logging.basicConfig(level=value, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _require_out(config) -> str:
    if not config.out:
        raise ConfigurationError("out: an output directory is required (--out or config key 'out')")
    return config.out


def _execute(args, config, workers: int) -> int:
    if args.command == "validate":
        sys.stdout.write(dumps_config(config))
        return EXIT_OK
    out = _require_out(config)
    if args.command == "heatmap":
        if not args.estimators:
            raise ConfigurationError("estimators: heatmap needs --estimators PATH (from 'csmc pilots')")
        grid = _parse_grid(args.grid)
        with open(args.estimators, encoding="utf-8") as fh:
            text = fh.read()
        est = runners.load_estimators(config, text)
        bundle = runners.heatmap_bundle(config, est, _parse_times(args.times, est.per_time), grid)
        stage = "heatmap"
    else:
        stage = args.command
        build = {"run": runners.run_experiment, "bench": runners.bench}.get(args.command)
        bundle = runners.pilots_bundle(config) if build is None else build(config, workers)
    try:
        written = write_outputs(bundle, out)
    except CsmcError as exc:
        raise CsmcError(f"{stage}: {exc}") from exc
    for path in written:
        log.info("wrote %s", path)
    print(f"{stage}: wrote {len(written)} files to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    stage = "config"
    try:
        args, extra = parser.parse_known_args(argv)
        config = resolve_config(args, extra)
        workers = _threads(args.threads)
        stage = args.command
        return _execute(args, config, workers)
    except _UsageError as exc:
        print(f"csmc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"csmc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CsmcError as exc:
        print(f"csmc: run failed during {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    except OSError as exc:
        print(f"csmc: I/O error during {stage}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
