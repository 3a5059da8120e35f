"""
Experiment harness.

    agentflow gen-trace --preset mini-swe --n-programs 64 --seed 1 --out trace.json
    agentflow run --policy program-aware --preset mini-swe --concurrency 32 --output-dir runs/a
    agentflow sweep --policies program-aware,request-aware --concurrencies 8,16,32,64,96
    agentflow compare runs/
    agentflow serve --config engine.yaml

Exit status is 1 when a trend verdict fails and 2 on an engine error.
"""

import argparse
import logging
import sys
from pathlib import Path

import yaml
from app.core.config import get_settings, load_engine_config
from app.core.errors import ConfigError, EngineError
from app.core.logging import configure_logging
from app.models.workload import ExperimentSpec, TraceOverrides
from app.scheduling import POLICIES
from app.services.experiments import (
    compare,
    format_summary,
    format_table,
    load_rows,
    run_experiment,
    sweep,
    sweep_specs,
)
from app.services.workload import PRESETS, generate_trace, save_trace
from pydantic import ValidationError

logger = logging.getLogger("app.cli")

EXIT_VERDICT = 1
EXIT_ERROR = 2


def _ints(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v.strip()]


def _names(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _steps(value: str) -> tuple[int, int]:
    lo, _, hi = value.partition("-")
    return int(lo), int(hi or lo)


def _add_workload_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None)
    parser.add_argument("--n-programs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--concurrency", type=int, default=None)
    parser.add_argument(
        "--arrival-rate", type=float, default=None, help="Open-loop arrivals per minute"
    )
    parser.add_argument("--steps", type=_steps, default=None, help="Step range, e.g. 6-12")
    parser.add_argument("--config", type=Path, default=None, help="Engine config YAML")


def _add_spec_args(parser: argparse.ArgumentParser) -> None:
    _add_workload_args(parser)
    parser.add_argument("--spec", type=Path, default=None, help="ExperimentSpec YAML/JSON file")
    parser.add_argument("--name", default=None)
    parser.add_argument("--trace", type=Path, default=None, help="Replay a saved trace")
    parser.add_argument("--duration", type=int, default=None, help="Stop after this many ticks")
    parser.add_argument("--output-dir", type=Path, default=None)


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    """An ExperimentSpec from an optional spec file with CLI flags on top."""
    data: dict = {}
    if getattr(args, "spec", None):
        if not args.spec.is_file():
            raise ConfigError(f"spec not found: {args.spec}")
        data = yaml.safe_load(args.spec.read_text(encoding="utf-8")) or {}
    flags = {
        "name": getattr(args, "name", None),
        "policy": getattr(args, "policy", None),
        "preset": args.preset,
        "n_programs": args.n_programs,
        "seed": args.seed,
        "concurrency": args.concurrency,
        "arrival_rate_per_minute": args.arrival_rate,
        "trace_path": str(args.trace) if getattr(args, "trace", None) else None,
        "duration_ticks": getattr(args, "duration", None),
        "output_dir": str(args.output_dir) if getattr(args, "output_dir", None) else None,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    if args.steps:
        data["overrides"] = {**(data.get("overrides") or {}), "steps": list(args.steps)}
    if args.config:
        data["engine"] = load_engine_config(args.config).model_dump()
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment spec: {e}") from e


def cmd_gen_trace(args: argparse.Namespace) -> int:
    engine = load_engine_config(args.config)
    trace = generate_trace(
        args.preset or "mini-swe",
        args.n_programs or 32,
        args.seed or 0,
        concurrency=args.concurrency,
        arrival_rate_per_minute=args.arrival_rate,
        overrides=TraceOverrides(steps=args.steps) if args.steps else None,
        profiles=engine.tools.profiles,
        ticks_per_minute=engine.simulation.ticks_per_minute,
    )
    path = save_trace(trace, args.out)
    print(f"Wrote {len(trace.programs)} programs to {path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    result = run_experiment(spec)
    print(format_summary(spec, result.report, result.report_hash), end="")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = build_spec(args)
    for policy in args.policies:
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}; choose from {sorted(POLICIES)}")
    specs = sweep_specs(base, args.policies, args.concurrencies, args.seeds)
    logger.info("Sweeping %d runs", len(specs))
    results = sweep(specs, workers=args.workers)
    table = compare([r.row for r in results])
    print(format_table(table))
    return 0 if table.passed else EXIT_VERDICT


def cmd_compare(args: argparse.Namespace) -> int:
    rows = load_rows(args.reports)
    if not rows:
        raise ConfigError("no reports found")
    table = compare(rows)
    print(format_table(table))
    return 0 if table.passed else EXIT_VERDICT


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    from app.main import create_app

    settings = get_settings()
    engine = load_engine_config(args.config or settings.engine_config_path)
    uvicorn.run(
        create_app(engine),
        host=args.host or settings.host,
        port=args.port or settings.port,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentflow", description="Program-aware agentic inference scheduling experiments"
    )
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-trace", help="Generate a reproducible workload trace")
    _add_workload_args(gen)
    gen.add_argument("--out", type=Path, required=True)
    gen.set_defaults(handler=cmd_gen_trace)

    run = commands.add_parser("run", help="Run one experiment on the simulator")
    _add_spec_args(run)
    run.add_argument("--policy", choices=sorted(POLICIES), default=None)
    run.set_defaults(handler=cmd_run)

    sw = commands.add_parser("sweep", help="Run a policy x concurrency grid and compare")
    _add_spec_args(sw)
    sw.add_argument("--policies", type=_names, default=["program-aware", "request-aware"])
    sw.add_argument("--concurrencies", type=_ints, default=[8, 16, 32, 64, 96])
    sw.add_argument("--seeds", type=_ints, default=None)
    sw.add_argument("--workers", type=int, default=None)
    sw.set_defaults(handler=cmd_sweep)

    cmp_ = commands.add_parser("compare", help="Compare saved reports")
    cmp_.add_argument("reports", nargs="+", type=Path, help="report.json files or run directories")
    cmp_.set_defaults(handler=cmd_compare)

    serve = commands.add_parser("serve", help="Start the gateway in front of simulated backends")
    serve.add_argument("--config", type=Path, default=None)
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or get_settings().log_level)
    try:
        return args.handler(args)
    except EngineError as e:
        logger.error("%s: %s", e.code, e.message)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
