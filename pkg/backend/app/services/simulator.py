"""
Cluster simulator.

Drives a workload trace through one scheduling policy over a set of
simulated backends, one tick at a time. Each tick runs, in order: arrivals,
backend polling, held tool results, tool completions, the scheduling pass
(or the guard), environment preparation for the head of the queue, backend
execution, Unused accounting and observation. A run is a pure function of
the trace, the policy and the engine config.

A tool result whose growth the policy does not admit yet is held: the
program stays Acting with its cache resident and is retried every tick.
"""

import heapq
import itertools
import logging
from collections import Counter, deque
from collections.abc import Sequence
from dataclasses import dataclass, field

from app.core.config import EngineConfig
from app.core.errors import DiskExhausted, PortsExhausted
from app.models.backend import SimEvent, SimEventKind
from app.models.cost import (
    CostComponent,
    EvictionCause,
    IntervalRow,
    MetricsReport,
    StpSample,
)
from app.models.program import (
    PauseRequested,
    ProgramId,
    ProgramPhase,
    ReleaseRequested,
    RestoreGranted,
    StatusKind,
    TokensDecoded,
    ToolCallIssued,
    ToolResultReady,
)
from app.models.scheduling import BackendView, ProgramView, ScheduleBatch
from app.models.workload import BackendFailure, ProgramScript, StepScript, WorkloadTrace
from app.scheduling import BasePolicy, GlobalWaitQueue, create_policy, pause
from app.services.backend_sim import SimBackend
from app.services.cost_ledger import (
    CostLedger,
    max_imbalance,
    steps_per_minute,
    summarize_latencies,
)
from app.services.program_registry import ProgramRegistry
from app.services.tool_manager import ToolManager

logger = logging.getLogger(__name__)

# Causes that free a whole cache between passes; only the next pass refills it
REFILLED_AT_NEXT_PASS = frozenset({EvictionCause.RELEASE, EvictionCause.ENGINE_RECLAIM})


@dataclass
class ProgramRun:
    """Simulator-side progress of one scripted program."""

    script: ProgramScript
    arrived_at: int
    step: int = 0
    decode_left: int = 0
    step_started: int = 0
    # Tokens computed before the last eviction; re-prefilled as Recompute
    kv_seen: int = 0
    evict_cause: EvictionCause | None = None
    tool_issued_at: int | None = None
    released_at: int | None = None

    @property
    def growth(self) -> int:
        """Tokens the current tool result adds, counting the next turn's decode."""
        return self.current.result_tokens + self.script.steps[self.step + 1].reasoning_tokens

    @property
    def id(self) -> ProgramId:
        return ProgramId(self.script.program_id)

    @property
    def current(self) -> StepScript:
        return self.script.steps[self.step]

    @property
    def last_step(self) -> bool:
        return self.step == len(self.script.steps) - 1


@dataclass
class UnusedWindow:
    """Unused STP of one backend between two monitor passes."""

    backend: str
    start: int
    c_min: int | None
    end: int | None = None
    unused: int = 0
    # A release, an engine reclaim or a failover freed memory mid-window
    disrupted: bool = False

    @property
    def ticks(self) -> int:
        return (self.end if self.end is not None else self.start) - self.start

    @property
    def bounded(self) -> bool:
        """Whether the window is one the Unused bound applies to."""
        return not self.disrupted and self.c_min is not None and self.c_min > 0


@dataclass
class SimulationResult:
    report: MetricsReport
    events: list[SimEvent]
    intervals: list[IntervalRow]
    unused_windows: list[UnusedWindow]
    footprints: list[tuple[int, ...]]
    program_tokens: dict[str, int]
    first_step_latency: dict[str, int]
    orphan_peak: int = 0
    final_disk: int = 0
    ledger: CostLedger | None = field(default=None, repr=False)


class ClusterSimulator:
    """Deterministic tick-driven cluster of simulated backends under one policy."""

    def __init__(
        self,
        trace: WorkloadTrace,
        policy: BasePolicy | str,
        engine: EngineConfig | None = None,
        *,
        failures: Sequence[BackendFailure] = (),
        duration_ticks: int | None = None,
        audit_leaks: bool = False,
        keep_samples: bool = False,
    ):
        self.engine = engine or EngineConfig()
        if isinstance(policy, str):
            policy = create_policy(policy, self.engine.scheduler, self.engine.baselines)
        self.policy = policy
        self.trace = trace
        self.failures = list(failures)
        self.duration_ticks = duration_ticks
        self.audit_leaks = audit_leaks

        cluster = self.engine.cluster
        self.ledger = CostLedger(keep_samples=keep_samples)
        self.backends = [
            SimBackend(
                f"backend-{i}",
                cluster.capacity_tokens,
                self.engine.scheduler.chunk,
                self.ledger,
                log_decode_tokens=self.engine.simulation.log_decode_tokens,
            )
            for i in range(cluster.backends)
        ]
        for backend in self.backends:
            backend.attach(policy.reclaim_order, policy.engine_preempts)
        self._by_id = {b.backend_id: b for b in self.backends}
        self._backend_ids = [b.backend_id for b in self.backends]

        self.registry = ProgramRegistry()
        self.queue = GlobalWaitQueue()
        self.tools = ToolManager(self.engine.pools, self.engine.tools.hooks_enabled)
        self.runs: dict[ProgramId, ProgramRun] = {}
        self.events: list[SimEvent] = []

        self._closed = trace.arrival.mode == "closed"
        if self._closed:
            self._pending: deque[ProgramScript] = deque(trace.programs)
        else:
            self._pending = deque(
                sorted(
                    trace.programs,
                    key=lambda s: s.arrival_tick if s.arrival_tick is not None else 0,
                )
            )
        self._tool_heap: list[tuple[int, int, ProgramId]] = []
        self._seq = itertools.count()
        self._deferred: dict[ProgramId, None] = {}
        # Tool results waiting for room on their backend, oldest first
        self._held: dict[ProgramId, None] = {}
        self.holds = 0

        self.completed_steps = 0
        self.released = 0
        self.elapsed = 0
        self.evictions: Counter[EvictionCause] = Counter()
        self._step_latencies: list[int] = []
        self._first_step: dict[str, int] = {}
        self._program_latencies: list[int] = []
        self._program_tokens: dict[str, int] = {}

        self.footprints: list[tuple[int, ...]] = []
        self.intervals: list[IntervalRow] = []
        self._row_start = 0
        self._row_totals: dict[str, dict[CostComponent, int]] = {}
        self.windows: list[UnusedWindow] = []
        self._open: dict[str, UnusedWindow] = {}
        self.orphan_peak = 0

    # Bookkeeping helpers

    @property
    def finished(self) -> bool:
        return self.released == len(self.trace.programs)

    def _log(
        self,
        now: int,
        kind: SimEventKind,
        program: ProgramId | None = None,
        backend: str | None = None,
        tokens: int = 0,
        cause: EvictionCause | None = None,
    ) -> None:
        self.events.append(SimEvent(now, kind, program, backend, tokens, cause))

    def _disrupt(self, backend_id: str | None) -> None:
        window = self._open.get(backend_id) if backend_id else None
        if window is not None:
            window.disrupted = True

    def _flush(self, pid: ProgramId, backend: SimBackend, now: int) -> None:
        decoded = backend.take_decoded(pid)
        if decoded:
            self.registry.apply(pid, TokensDecoded(decoded), now)
            self.runs[pid].decode_left -= decoded

    def _process(self, events: list[SimEvent], now: int) -> None:
        for event in events:
            self.events.append(event)
            if event.kind is SimEventKind.STEP_EMISSION_COMPLETE:
                self._flush(event.program, self._by_id[event.backend], now)
                self._issue_tool_call(self.runs[event.program], now)
            elif event.kind is SimEventKind.EVICTION_PERFORMED:
                self._on_evicted(event, now)

    def _on_evicted(self, event: SimEvent, now: int) -> None:
        pid = event.program
        run = self.runs[pid]
        run.kv_seen = max(run.kv_seen, event.tokens)
        run.evict_cause = event.cause
        self.evictions[event.cause] += 1
        if event.cause in REFILLED_AT_NEXT_PASS:
            self._disrupt(event.backend)

        program = self.registry.get(pid)
        if program.is_active and program.placement == event.backend:
            # The engine evicted on its own; the program follows its cache out
            self._flush(pid, self._by_id[event.backend], now)
            program = self.registry.apply(pid, PauseRequested(), now)
            self.queue.push_program(program, now)
            self._reserve(pid)
            self._log(now, SimEventKind.PAUSED, pid, event.backend, cause=event.cause)
            self._settle_hold(pid, now)

    def _reserve(self, pid: ProgramId) -> None:
        entry = self.queue.get(pid)
        if entry is not None:
            reasoning = entry.phase is ProgramPhase.REASONING
            self.queue.reserve(pid, self.runs[pid].decode_left if reasoning else 0)

    def _settle_hold(self, pid: ProgramId, now: int) -> None:
        # A paused program takes its waiting result into the queue with it
        if pid in self._held:
            self._deliver(self.runs[pid], now)

    # Program lifecycle

    def _arrive(self, script: ProgramScript, now: int) -> None:
        program = self.registry.register(script.program_id, script.prompt_tokens, now=now)
        run = ProgramRun(
            script,
            arrived_at=now,
            step_started=now,
            decode_left=script.steps[0].reasoning_tokens,
        )
        self.runs[program.id] = run
        self.queue.push_program(program, now)
        self._reserve(program.id)
        self.policy.on_arrival(program.id, self._backend_ids)
        self._log(now, SimEventKind.PROGRAM_ARRIVED, program.id, tokens=script.prompt_tokens)

    def _arrivals(self, now: int) -> None:
        if self._closed:
            if now == 0:
                for _ in range(min(self.trace.concurrency, len(self._pending))):
                    self._arrive(self._pending.popleft(), now)
            return
        while self._pending and (self._pending[0].arrival_tick or 0) <= now:
            self._arrive(self._pending.popleft(), now)

    def _prepare(self, run: ProgramRun, now: int) -> None:
        if self.tools.env_for(run.id) is not None:
            return
        try:
            env = self.tools.prepare_async(run.id, run.script.env, now, run.script.profile)
        except (DiskExhausted, PortsExhausted):
            return
        self.registry.add_tool_env(run.id, env.env_id)

    def _issue_tool_call(self, run: ProgramRun, now: int) -> None:
        pid = run.id
        env = self.tools.env_for(pid)
        if env is None:
            try:
                env = self.tools.acquire_profile(pid, run.script.env, now, run.script.profile)
            except (DiskExhausted, PortsExhausted) as e:
                if pid not in self._deferred:
                    logger.debug("Tool call of %s deferred: %s", pid, e.message)
                self._deferred[pid] = None
                return
            self.registry.add_tool_env(pid, env.env_id)
        self._deferred.pop(pid, None)

        program = self.registry.apply(pid, ToolCallIssued(env.env_id), now)
        tool_run = self.tools.execute_tool(env, pid, run.current.tool_latency, now)
        run.tool_issued_at = now
        heapq.heappush(self._tool_heap, (tool_run.done_at, next(self._seq), pid))
        self.policy.on_tool_call(pid, program.placement or "", now)
        self.completed_steps += 1
        self._log(now, SimEventKind.TOOL_CALL, pid, program.placement, tool_run.done_at - now)

    def _retry_deferred(self, now: int) -> None:
        for pid in list(self._deferred):
            program = self.registry.get(pid)
            if program.status.kind is not StatusKind.REASONING:
                continue
            backend = self._by_id[program.placement]
            if backend.is_idle(pid) and self.runs[pid].decode_left == 0:
                self._issue_tool_call(self.runs[pid], now)

    def _complete_tools(self, now: int) -> None:
        while self._tool_heap and self._tool_heap[0][0] <= now:
            _, _, pid = heapq.heappop(self._tool_heap)
            self._tool_result(self.runs[pid], now)

    def _tool_result(self, run: ProgramRun, now: int) -> None:
        pid = run.id
        self.policy.on_tool_result(pid, now - (run.tool_issued_at or now), now)
        self._step_latencies.append(now - run.step_started)
        if run.step == 0:
            self._first_step[pid] = now - run.arrived_at
        result_tokens = run.current.result_tokens
        program = self.registry.get(pid)
        self._log(now, SimEventKind.TOOL_RESULT, pid, program.placement, result_tokens)

        if run.last_step:
            self._finish(run, now, result_tokens)
            return

        run.step_started = now
        if program.is_active:
            backend = self._by_id[program.placement]
            if not self.policy.admits_growth(now, self._view(backend, now), pid, run.growth):
                self._held[pid] = None
                self.holds += 1
                logger.debug(
                    "Tick %d: result of %s waits for %d tokens on %s",
                    now,
                    pid,
                    run.growth,
                    backend.backend_id,
                )
                return
        self._deliver(run, now)

    def _retry_holds(self, now: int) -> None:
        for pid in list(self._held):
            run = self.runs[pid]
            backend = self._by_id[self.registry.get(pid).placement]
            if self.policy.admits_growth(now, self._view(backend, now), pid, run.growth):
                self._deliver(run, now)

    def _deliver(self, run: ProgramRun, now: int) -> None:
        """Hand the current tool result to the program and start its next turn."""
        pid = run.id
        self._held.pop(pid, None)
        result_tokens = run.current.result_tokens
        run.step += 1
        run.decode_left = run.current.reasoning_tokens
        program = self.registry.apply(pid, ToolResultReady(result_tokens), now)
        if program.is_paused:
            self.queue.update(program)
            self._reserve(pid)
            return

        backend = self._by_id[program.placement]
        if backend.is_prefilling(pid):
            backend.extend(pid, result_tokens, run.decode_left)
        else:
            backend.admit(
                pid,
                program.context_tokens,
                now,
                history_tokens=run.kv_seen,
                decode_budget=run.decode_left,
                cause=run.evict_cause,
            )
        self._process(backend.drain_events(), now)

    def _finish(self, run: ProgramRun, now: int, result_tokens: int) -> None:
        pid = run.id
        program = self.registry.apply(pid, ToolResultReady(result_tokens), now)
        placement = program.placement
        program = self.registry.apply(pid, ReleaseRequested(), now)
        if placement is not None:
            backend = self._by_id[placement]
            backend.evict(pid, now, EvictionCause.RELEASE)
            self._process(backend.drain_events(), now)
        else:
            self.queue.remove(pid)
        self._deferred.pop(pid, None)
        self.tools.on_program_stopped(program)
        self.policy.on_release(pid)

        run.released_at = now
        self.released += 1
        self._program_latencies.append(now - run.arrived_at)
        self._program_tokens[pid] = program.total_tokens
        self._log(now, SimEventKind.RELEASED, pid, placement, program.total_tokens)

        if self._closed and self._pending:
            self._arrive(self._pending.popleft(), now)

    # Scheduling

    def _view(self, backend: SimBackend, now: int) -> BackendView:
        programs = []
        if backend.healthy:
            for pid in backend.resident:
                program = self.registry.get(pid)
                run = self.runs[pid]
                pending = backend.pending_decoded(pid)
                reasoning = program.phase is ProgramPhase.REASONING
                programs.append(
                    ProgramView(
                        program_id=pid,
                        context_tokens=program.context_tokens + pending,
                        phase=program.phase,
                        acting_since=program.status.acting_since,
                        idle_since=backend.idle_since.get(pid),
                        reserved_tokens=max(0, run.decode_left - pending) if reasoning else 0,
                        held_tokens=run.growth if pid in self._held else 0,
                    )
                )
        return BackendView(
            backend_id=backend.backend_id,
            capacity_tokens=backend.capacity_tokens,
            programs=tuple(programs),
            healthy=backend.healthy,
            stalled_tokens=backend.stalled,
            taken_at=now,
        )

    def _views(self, now: int) -> list[BackendView]:
        return [self._view(backend, now) for backend in self.backends]

    def _pause(
        self, pid: ProgramId, backend: SimBackend, now: int, cause: EvictionCause | None
    ) -> None:
        self._flush(pid, backend, now)
        program = pause(
            self.registry.get(pid), now, backend=backend, queue=self.queue, cause=cause
        )
        self.registry.commit(program)
        self._reserve(pid)
        self._log(now, SimEventKind.PAUSED, pid, backend.backend_id, cause=cause)
        self._process(backend.drain_events(), now)
        self._settle_hold(pid, now)

    def _restore(self, pid: ProgramId, backend: SimBackend, now: int) -> None:
        program = self.registry.apply(pid, RestoreGranted(backend.backend_id), now)
        self.queue.remove(pid)
        run = self.runs[pid]
        if self.engine.tools.async_prep:
            self._prepare(run, now)
        self._log(now, SimEventKind.RESTORED, pid, backend.backend_id, program.context_tokens)
        backend.admit(
            pid,
            program.context_tokens,
            now,
            history_tokens=run.kv_seen,
            decode_budget=run.decode_left if program.phase is ProgramPhase.REASONING else None,
            cause=run.evict_cause,
        )
        self._process(backend.drain_events(), now)

    def _apply(self, batch: ScheduleBatch, now: int) -> set[ProgramId]:
        paused: set[ProgramId] = set()
        for decision in batch.pauses:
            pid = decision.program_id
            program = self.registry.get(pid)
            if not program.is_active or program.placement != decision.backend_id:
                continue
            self._pause(pid, self._by_id[decision.backend_id], now, decision.cause)
            paused.add(pid)
        for decision in batch.restores:
            pid = decision.program_id
            backend = self._by_id[decision.backend_id]
            if self.registry.get(pid).is_paused and backend.healthy:
                self._restore(pid, backend, now)
        return paused

    def _schedule(self, now: int) -> None:
        if now % self.policy.interval == 0:
            batch = self.policy.schedule(now, self._views(now), self.queue)
            paused = self._apply(batch, now)
        else:
            paused = set()
            if self.engine.scheduler.per_step_guard:
                guard = self.policy.guard(now, self._views(now))
                if guard is not None:
                    paused = self._apply(guard, now)
        if now % self.engine.scheduler.delta_t == 0:
            self._roll_windows(now, paused)

    def _roll_windows(self, now: int, paused: set[ProgramId]) -> None:
        for window in self._open.values():
            window.end = now
        self._open = {}
        sizes = [e.demand for e in self.queue.ordered() if e.program_id not in paused]
        c_min = min(sizes) if sizes else None
        for backend in self.backends:
            if backend.healthy:
                window = UnusedWindow(backend.backend_id, now, c_min)
                self.windows.append(window)
                self._open[backend.backend_id] = window

    def _prepare_ahead(self, now: int) -> None:
        lookahead = self.engine.prep_lookahead
        if not self.engine.tools.async_prep or lookahead <= 0:
            return
        for entry in self.queue.ordered()[:lookahead]:
            self._prepare(self.runs[entry.program_id], now)

    # Health

    def _poll(self, now: int) -> None:
        for failure in self.failures:
            backend = self.backends[failure.backend]
            if now == failure.down_at and backend.healthy:
                logger.warning("Backend %s down at tick %d", backend.backend_id, now)
                self._disrupt(backend.backend_id)
                self._log(now, SimEventKind.BACKEND_DOWN, backend=backend.backend_id)
                for pid in backend.fail():
                    self._pause(pid, backend, now, EvictionCause.FAILOVER)
            elif failure.up_at is not None and now == failure.up_at and not backend.healthy:
                logger.info("Backend %s back at tick %d", backend.backend_id, now)
                backend.recover()
                self._log(now, SimEventKind.BACKEND_UP, backend=backend.backend_id)

    # Accounting

    def _account_unused(self, now: int) -> None:
        if not len(self.queue):
            return
        held: Counter[str] = Counter()
        for pid in self._held:
            held[self.registry.get(pid).placement] += self.runs[pid].growth
        for backend in self.backends:
            if not backend.healthy:
                continue
            unused = backend.unused(held[backend.backend_id])
            if unused:
                self.ledger.record(
                    StpSample(None, backend.backend_id, CostComponent.UNUSED, unused, tick=now)
                )
                window = self._open.get(backend.backend_id)
                if window is not None:
                    window.unused += unused

    def _observe(self, now: int) -> None:
        self.footprints.append(tuple(b.used for b in self.backends))
        if self.audit_leaks:
            orphans = self.tools.leak_audit(self.registry)
            if len(orphans) > self.orphan_peak:
                logger.warning("Tick %d: %d orphaned environments", now, len(orphans))
                self.orphan_peak = len(orphans)
        if (now + 1) % self.engine.simulation.report_interval == 0:
            self._emit_rows(now)

    def _emit_rows(self, now: int) -> None:
        span = self.footprints[self._row_start :]
        if not span:
            return
        capacity = self.engine.cluster.capacity_tokens
        imbalance = max_imbalance(span, capacity) if len(self.backends) > 1 else None
        hit_rate = self.ledger.kv_hit_rate_or_none()
        for backend in self.backends:
            totals = self.ledger.by_backend(backend.backend_id)
            before = self._row_totals.get(backend.backend_id, {c: 0 for c in CostComponent})
            delta = {c: totals[c] - before[c] for c in CostComponent}
            self.intervals.append(
                IntervalRow(
                    tick=now,
                    backend=backend.backend_id,
                    resident_tokens=backend.used,
                    decode=delta[CostComponent.DECODE],
                    prefill=delta[CostComponent.PREFILL],
                    recompute=delta[CostComponent.RECOMPUTE],
                    unused=delta[CostComponent.UNUSED],
                    caching=delta[CostComponent.CACHING],
                    hit_rate=hit_rate,
                    imbalance=imbalance,
                )
            )
            self._row_totals[backend.backend_id] = totals
        self._row_start = len(self.footprints)

    # Driver

    def step(self, now: int) -> None:
        """Advance the whole cluster by one tick."""
        self._arrivals(now)
        self._poll(now)
        self._retry_holds(now)
        self._complete_tools(now)
        self._retry_deferred(now)
        self._schedule(now)
        self._prepare_ahead(now)
        for backend in self.backends:
            if backend.healthy:
                self._process(backend.advance(now), now)
        self._account_unused(now)
        self._observe(now)

    def run(self) -> SimulationResult:
        limit = (
            self.duration_ticks
            if self.duration_ticks is not None
            else self.engine.simulation.max_ticks
        )
        logger.info(
            "Simulating %d programs under %s on %d backends",
            len(self.trace.programs),
            self.policy.name,
            len(self.backends),
        )
        now = 0
        while now < limit and not self.finished:
            self.step(now)
            now += 1
        self.elapsed = now
        for window in self._open.values():
            window.end = now
        self._emit_rows(now - 1)
        if not self.finished and limit == self.engine.simulation.max_ticks:
            logger.warning(
                "Stopped at max_ticks=%d with %d of %d programs released",
                limit,
                self.released,
                len(self.trace.programs),
            )
        logger.info(
            "Finished after %d ticks: %d steps, %d programs",
            now,
            self.completed_steps,
            self.released,
        )
        return SimulationResult(
            report=self.report(),
            events=self.events,
            intervals=self.intervals,
            unused_windows=self.windows,
            footprints=self.footprints,
            program_tokens=dict(self._program_tokens),
            first_step_latency=dict(self._first_step),
            orphan_peak=self.orphan_peak,
            final_disk=self.tools.pools.disk_used,
            ledger=self.ledger,
        )

    def report(self) -> MetricsReport:
        capacity = self.engine.cluster.capacity_tokens
        imbalance = (
            max_imbalance(self.footprints, capacity)
            if len(self.backends) > 1 and self.footprints
            else None
        )
        return MetricsReport(
            throughput_steps_per_min=steps_per_minute(
                self.completed_steps, self.elapsed, self.engine.simulation.ticks_per_minute
            ),
            kv_hit_rate=self.ledger.kv_hit_rate_or_none(),
            max_imbalance=imbalance,
            per_step_latency=summarize_latencies(self._step_latencies),
            first_step_latency=summarize_latencies(list(self._first_step.values())),
            program_latency=summarize_latencies(self._program_latencies),
            cost_breakdown=self.ledger.decompose(),
            total_cost=self.ledger.total,
            disk_peak=self.tools.disk_peak,
            prep_overlap_savings=self.tools.prep_overlap_savings,
            completed_steps=self.completed_steps,
            completed_programs=self.released,
            elapsed_ticks=self.elapsed,
            evictions_by_cause={c: self.evictions[c] for c in EvictionCause if self.evictions[c]},
            reasoning_eviction_recompute=self.ledger.reasoning_eviction_recompute,
        )


def run_policy(
    trace: WorkloadTrace,
    policy: BasePolicy | str,
    engine: EngineConfig | None = None,
    **options,
) -> SimulationResult:
    """Simulate ``trace`` under ``policy``; identical inputs give identical results."""
    return ClusterSimulator(trace, policy, engine, **options).run()
