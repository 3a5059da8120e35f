"""
Experiment runner.

Runs an ExperimentSpec on the simulator, writes its artifacts (event log,
per-interval CSV, plain-text summary, JSON report), fans sweeps out over a
process pool and turns a set of reports into a comparison table with trend
verdicts.
"""

import csv
import hashlib
import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from app.core.errors import ConfigError, IncomparableReports
from app.models.cost import CostComponent, IntervalRow, MetricsReport
from app.models.workload import (
    ComparisonRow,
    ComparisonTable,
    ExperimentSpec,
    TrendVerdict,
    WorkloadTrace,
)
from app.services.simulator import SimulationResult, run_policy
from app.services.workload import generate_trace, load_trace

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.txt"
REPORT_FILE = "report.json"


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    report: MetricsReport
    row: ComparisonRow
    report_hash: str
    events_digest: str
    simulation: SimulationResult | None = None
    output_dir: Path | None = None


def build_trace(spec: ExperimentSpec) -> WorkloadTrace:
    if spec.trace_path:
        trace = load_trace(spec.trace_path)
        if spec.concurrency is not None and trace.arrival.mode == "closed":
            arrival = trace.arrival.model_copy(update={"concurrency": spec.concurrency})
            trace = trace.model_copy(update={"arrival": arrival})
        return trace
    return generate_trace(
        spec.preset,
        spec.n_programs,
        spec.seed,
        concurrency=spec.concurrency,
        arrival_rate_per_minute=spec.arrival_rate_per_minute,
        overrides=spec.overrides,
        profiles=spec.engine.tools.profiles,
        ticks_per_minute=spec.engine.simulation.ticks_per_minute,
    )


def _dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def comparison_row(
    spec: ExperimentSpec, report: MetricsReport, concurrency: int
) -> ComparisonRow:
    costs = report.cost_breakdown
    return ComparisonRow(
        policy=spec.policy,
        preset=spec.preset,
        concurrency=concurrency,
        seed=spec.seed,
        steps_per_min=report.throughput_steps_per_min,
        kv_hit_rate=report.kv_hit_rate,
        max_imbalance=report.max_imbalance,
        total_cost=report.total_cost,
        caching_cost=costs.get(CostComponent.CACHING, 0),
        recompute_cost=costs.get(CostComponent.RECOMPUTE, 0),
        step_latency_p50=report.per_step_latency.p50,
        step_latency_p95=report.per_step_latency.p95,
        completed_programs=report.completed_programs,
        spec_hash=spec.spec_hash(),
    )


def format_summary(spec: ExperimentSpec, report: MetricsReport, report_hash: str) -> str:
    hit_rate = f"{report.kv_hit_rate:.4f}" if report.kv_hit_rate is not None else "n/a"
    imbalance = f"{report.max_imbalance:.4f}" if report.max_imbalance is not None else "n/a"
    lines = [
        f"experiment       {spec.name}",
        f"policy           {spec.policy}",
        f"preset           {spec.preset}",
        f"seed             {spec.seed}",
        f"spec hash        {spec.spec_hash()}",
        f"report hash      {report_hash}",
        "",
        f"elapsed ticks    {report.elapsed_ticks}",
        f"steps/min        {report.throughput_steps_per_min:.3f}",
        f"completed steps  {report.completed_steps}",
        f"programs done    {report.completed_programs}",
        f"kv hit rate      {hit_rate}",
        f"max imbalance    {imbalance}",
        f"step latency     p50 {report.per_step_latency.p50:.1f}  "
        f"p95 {report.per_step_latency.p95:.1f}  p99 {report.per_step_latency.p99:.1f}",
        f"first step       mean {report.first_step_latency.mean:.1f}",
        f"disk peak        {report.disk_peak}",
        f"prep overlap     {report.prep_overlap_savings}",
        "",
        "cost (token-ticks)",
    ]
    for component in CostComponent:
        lines.append(f"  {component.value:<14} {report.cost_breakdown.get(component, 0)}")
    lines.append(f"  {'total':<14} {report.total_cost}")
    if report.evictions_by_cause:
        lines.append("")
        lines.append("evictions")
        for cause, count in report.evictions_by_cause.items():
            lines.append(f"  {cause.value:<14} {count}")
    return "\n".join(lines) + "\n"


def write_outputs(
    out: Path,
    spec: ExperimentSpec,
    simulation: SimulationResult,
    payload: dict[str, Any],
    event_lines: list[str],
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / EVENTS_FILE).write_text("".join(line + "\n" for line in event_lines), encoding="utf-8")
    with open(out / METRICS_FILE, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=IntervalRow.columns())
        writer.writeheader()
        for row in simulation.intervals:
            writer.writerow(row.model_dump())
    (out / SUMMARY_FILE).write_text(
        format_summary(spec, simulation.report, payload["report_hash"]), encoding="utf-8"
    )
    (out / REPORT_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(spec: ExperimentSpec, keep_simulation: bool = False) -> ExperimentResult:
    """
    Run one experiment; the report hash depends only on the spec.

    Raises:
        ConfigError: the spec or its trace is inconsistent.
    """
    trace = build_trace(spec)
    for failure in spec.failures:
        if not 0 <= failure.backend < spec.engine.cluster.backends:
            raise ConfigError(f"failure names unknown backend {failure.backend}")

    logger.info("Running %s (%s, spec %s)", spec.name, spec.policy, spec.spec_hash())
    simulation = run_policy(
        trace,
        spec.policy,
        spec.engine,
        failures=spec.failures,
        duration_ticks=spec.duration_ticks,
    )
    report = simulation.report

    event_lines = [_dumps(event.to_record()) for event in simulation.events]
    events_digest = hashlib.sha256("\n".join(event_lines).encode()).hexdigest()[:16]
    row = comparison_row(spec, report, trace.concurrency)
    hashed = {
        "spec": spec.model_dump(mode="json", exclude={"output_dir", "name"}),
        "report": report.model_dump(mode="json"),
        "events_digest": events_digest,
    }
    report_hash = hashlib.sha256(_dumps(hashed).encode()).hexdigest()[:16]

    output_dir = None
    if spec.output_dir:
        output_dir = Path(spec.output_dir)
        payload = {
            **hashed,
            "name": spec.name,
            "spec_hash": spec.spec_hash(),
            "report_hash": report_hash,
            "row": row.model_dump(mode="json"),
        }
        write_outputs(output_dir, spec, simulation, payload, event_lines)
        logger.info("Wrote %s", output_dir)

    return ExperimentResult(
        spec=spec,
        report=report,
        row=row,
        report_hash=report_hash,
        events_digest=events_digest,
        simulation=simulation if keep_simulation else None,
        output_dir=output_dir,
    )


def sweep_specs(
    base: ExperimentSpec,
    policies: Sequence[str],
    concurrencies: Sequence[int],
    seeds: Sequence[int] | None = None,
) -> list[ExperimentSpec]:
    specs = []
    for policy in policies:
        for n in concurrencies:
            for seed in seeds or [base.seed]:
                name = f"{policy}-n{n}-s{seed}"
                specs.append(
                    base.model_copy(
                        update={
                            "name": name,
                            "policy": policy,
                            "concurrency": n,
                            "n_programs": max(base.n_programs, n),
                            "seed": seed,
                            "output_dir": str(Path(base.output_dir) / name)
                            if base.output_dir
                            else None,
                        }
                    )
                )
    return specs


def sweep(specs: Sequence[ExperimentSpec], workers: int | None = None) -> list[ExperimentResult]:
    """Run independent experiments, in parallel processes unless ``workers`` is 1."""
    if workers == 1 or len(specs) <= 1:
        return [run_experiment(spec) for spec in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_experiment, specs))


def load_rows(paths: Iterable[str | Path]) -> list[ComparisonRow]:
    """Comparison rows from report.json files or directories containing them."""
    rows = []
    for path in paths:
        path = Path(path)
        files = sorted(path.rglob(REPORT_FILE)) if path.is_dir() else [path]
        for file in files:
            try:
                payload = json.loads(file.read_text(encoding="utf-8"))
                rows.append(ComparisonRow.model_validate(payload["row"]))
            except (OSError, ValueError, KeyError) as e:
                raise ConfigError(f"unreadable report {file}: {e}") from e
    return rows


def _curves(rows: Sequence[ComparisonRow]) -> dict[str, dict[int, float]]:
    grouped: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        grouped[row.policy][row.concurrency].append(row.steps_per_min)
    return {
        policy: {n: float(np.mean(v)) for n, v in sorted(by_n.items())}
        for policy, by_n in grouped.items()
    }


def compare(
    rows: Sequence[ComparisonRow],
    *,
    stability_band: float = 0.10,
    baseline_drop: float = 0.30,
    seed_band: float = 0.05,
) -> ComparisonTable:
    """
    Tabulate runs and check the expected trends.

    Verdicts are only produced when the rows contain what they compare:
    program-aware stability past its peak, request-aware degradation at the
    highest concurrency, program-aware ordering against each baseline, and
    throughput agreement across seeds.

    Raises:
        IncomparableReports: rows come from different presets.
    """
    presets = sorted({r.preset for r in rows})
    if len(presets) > 1:
        raise IncomparableReports(f"reports mix presets {presets}", presets=presets)
    ordered = sorted(rows, key=lambda r: (r.policy, r.concurrency, r.seed))
    if len(ordered) < 2:
        return ComparisonTable(rows=ordered)

    verdicts: list[TrendVerdict] = []
    curves = _curves(ordered)
    aware = curves.get("program-aware", {})
    request = curves.get("request-aware", {})
    ttl = curves.get("ttl-pin", {})

    if len(aware) > 1:
        peak_n = max(aware, key=lambda n: (aware[n], -n))
        peak = aware[peak_n]
        beyond = {n: v for n, v in aware.items() if n > peak_n}
        worst = min(beyond.values(), default=peak)
        verdicts.append(
            TrendVerdict(
                name="program-aware stability",
                passed=worst >= (1 - stability_band) * peak,
                detail=f"peak {peak:.2f} at N={peak_n}, worst beyond peak {worst:.2f}",
            )
        )
    if len(request) > 1:
        peak = max(request.values())
        top = request[max(request)]
        verdicts.append(
            TrendVerdict(
                name="request-aware degradation",
                passed=peak > 0 and top <= (1 - baseline_drop) * peak,
                detail=f"peak {peak:.2f}, at N={max(request)} {top:.2f}",
            )
        )
    shared = sorted(set(aware) & set(request))
    if shared:
        losing = [n for n in shared if aware[n] < request[n]]
        verdicts.append(
            TrendVerdict(
                name="program-aware >= request-aware",
                passed=not losing,
                detail=f"compared at N={shared}" + (f", behind at {losing}" if losing else ""),
            )
        )
    shared = sorted(set(aware) & set(ttl))
    if shared:
        losing = [n for n in shared if aware[n] <= ttl[n]]
        verdicts.append(
            TrendVerdict(
                name="program-aware > ttl-pin",
                passed=not losing,
                detail=f"compared at N={shared}" + (f", not ahead at {losing}" if losing else ""),
            )
        )

    groups: dict[tuple[str, int], list[float]] = defaultdict(list)
    for row in ordered:
        groups[(row.policy, row.concurrency)].append(row.steps_per_min)
    spreads = {
        key: (max(v) - min(v)) / float(np.mean(v))
        for key, v in groups.items()
        if len(v) > 1 and np.mean(v) > 0
    }
    if spreads:
        key, worst = max(spreads.items(), key=lambda kv: kv[1])
        verdicts.append(
            TrendVerdict(
                name="seed band",
                passed=worst <= 2 * seed_band,
                detail=f"largest spread {worst:.3f} ({key[0]}, N={key[1]})",
            )
        )
    return ComparisonTable(rows=ordered, verdicts=verdicts)


def format_table(table: ComparisonTable) -> str:
    header = (
        f"{'policy':<16}{'N':>5}{'seed':>6}{'steps/min':>11}{'hit':>8}"
        f"{'imbal':>8}{'caching':>14}{'recompute':>14}{'done':>6}"
    )
    lines = [header, "-" * len(header)]
    for r in table.rows:
        hit = f"{r.kv_hit_rate:.3f}" if r.kv_hit_rate is not None else "n/a"
        imbalance = f"{r.max_imbalance:.3f}" if r.max_imbalance is not None else "n/a"
        lines.append(
            f"{r.policy:<16}{r.concurrency:>5}{r.seed:>6}{r.steps_per_min:>11.2f}{hit:>8}"
            f"{imbalance:>8}{r.caching_cost:>14}{r.recompute_cost:>14}{r.completed_programs:>6}"
        )
    if table.verdicts:
        lines.append("")
        for v in table.verdicts:
            lines.append(f"[{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.detail}")
    return "\n".join(lines) + "\n"
