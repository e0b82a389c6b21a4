"""Command-line front end.

Subcommands: ``run`` (execute a config), ``enumerate`` (exact oracle
mode), ``validate`` (check a config) and ``presets`` (list experiments).
Exit codes: 0 success, 2 parse error, 3 validation error, 4 runtime error,
5 I/O error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .ensemble import enumerate_trajectories, run_ensemble
from .errors import ConfigParseError, ConfigValidationError, QThermoError, RecordFormatError, SchemaVersionMismatchError
from .experiments import PRESETS
from .io import RunConfig, entropies_from_stats, export_plot_data, load_config, parse_config, with_overrides, write_records

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4
EXIT_IO = 5


def _load(args) -> RunConfig:
    if args.config is None and getattr(args, "experiment", None) is None:
        raise ConfigValidationError("config", "give --config or --experiment")
    config = load_config(args.config) if args.config else parse_config(f"experiment: {args.experiment}\n")
    threads = 1 if getattr(args, "single_thread", False) else getattr(args, "threads", None)
    return with_overrides(config, seed=args.seed, n_trajectories=args.n, dt=args.dt, output_dir=args.out, threads=threads)


def _print_estimators(stats, out) -> None:
    print(f"{stats.experiment}: {stats.n_trajectories} trajectories, {stats.divergent_count} divergent", file=out)
    for name, est in sorted(stats.estimators.items()):
        err = "" if not est.stderr or math.isnan(est.stderr) else f" +/- {est.stderr:.3g}"
        print(f"  {name:22s} {est.value:.12g}{err}", file=out)


def cmd_run(args) -> int:
    config = _load(args)
    spec = config.build()
    stats = run_ensemble(
        spec, config.n_trajectories, config.seed, threads=config.threads, keep_records=config.export["records"],
    )
    _write_outputs(config, stats)
    _print_estimators(stats, sys.stdout)
    return EXIT_OK


def cmd_enumerate(args) -> int:
    config = _load(args)
    spec = config.build()
    result = enumerate_trajectories(spec, max_nodes=args.max_nodes)
    stats = result.stats
    stats.records = result.records
    _write_outputs(config, stats)
    print(f"{len(result.records)} branches, total probability {result.total_probability:.17g}")
    _print_estimators(stats, sys.stdout)
    return EXIT_OK


def _write_outputs(config: RunConfig, stats) -> None:
    out = Path(config.output_dir)
    try:
        if config.export["estimators"] or config.export["histograms"]:
            export_plot_data(stats, out)
        if config.export["records"] and stats.records is not None:
            write_records(stats.records, out / "records.jsonl", entropies_from_stats(stats))
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc


class _IOFailure(Exception):
    pass


def cmd_validate(args) -> int:
    config = _load(args)
    spec = config.build()
    print(f"ok: {config.experiment}, {spec.protocol.scheme}, {spec.protocol.n_steps} steps, dt={spec.protocol.dt!r}")
    for key, value in sorted(config.resolved_parameters().items()):
        print(f"  {key} = {value!r}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, (_, params) in PRESETS.items():
        print(name)
        for key, p in params.items():
            print(f"  {key:12s} default={p.default!r:22s} {p.doc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qthermo", description="Stochastic thermodynamics of monitored qubits.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs: bool = True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--experiment", help="preset name when no config is given")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--n", type=int, help="number of trajectories")
        p.add_argument("--dt", type=float, help="timestep override")
        p.add_argument("--out", help="output directory")
        if runs:
            p.add_argument("--threads", type=int, help="worker threads")
            p.add_argument("--single-thread", action="store_true", help="run in the calling thread")

    p = sub.add_parser("run", help="run a Monte-Carlo ensemble")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("enumerate", help="enumerate every trajectory exactly")
    common(p)
    p.add_argument("--max-nodes", type=int, default=10**6, help="outcome-tree size limit")
    p.set_defaults(func=cmd_enumerate)
    p = sub.add_parser("validate", help="check a configuration")
    common(p, runs=False)
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("presets", help="list experiments and their parameters")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (_IOFailure, OSError, RecordFormatError, SchemaVersionMismatchError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QThermoError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
