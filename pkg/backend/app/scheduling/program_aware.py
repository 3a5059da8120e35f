"""
Program-aware scheduling.

Periodic thrashing detection over time-decayed effective load, shortest-first
pause selection among acting programs, and score-ordered restore from the
global waiting queue onto the least-loaded backend that stays under the high
watermark. A Reasoning program weighs its context plus the rest of its
current turn, so a backend never admits more decode than it can hold.
"""

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Protocol

from app.core.config import SchedulerConfig
from app.core.errors import CapacityExceeded, IllegalTransition, Shortfall
from app.models.cost import EvictionCause
from app.models.program import (
    AgentProgram,
    PauseRequested,
    ProgramId,
    ProgramPhase,
    RestoreGranted,
)
from app.models.scheduling import (
    BackendView,
    DecaySpec,
    ProgramView,
    QueueEntry,
    ScheduleBatch,
    ScheduleDecision,
)
from app.scheduling.base import BasePolicy
from app.scheduling.decay import acting_weight
from app.scheduling.queue import GlobalWaitQueue, pause_score
from app.services.program_registry import apply_event

logger = logging.getLogger(__name__)


def program_weight(
    view: ProgramView, decay: DecaySpec, now: int, interval: int = 1
) -> float:
    if view.phase is ProgramPhase.ACTING:
        return acting_weight(view.context_tokens, view.acting_since, decay, now, interval)
    return float(view.context_tokens + view.reserved_tokens)


def effective_load(
    programs: Iterable[ProgramView], decay: DecaySpec, now: int, interval: int = 1
) -> float:
    """Reasoning tokens at full weight plus Acting tokens discounted by tool time."""
    return sum(program_weight(p, decay, now, interval) for p in programs)


def thrashing_pressure(capacity_tokens: float, eff_load: float, lambda_max: float) -> float:
    """Tokens that must be released to get back under the high watermark."""
    if capacity_tokens <= 0:
        raise ValueError("capacity must be positive")
    return max(0.0, eff_load - lambda_max * capacity_tokens)


@dataclass(frozen=True)
class EvictionSelection:
    programs: tuple[ProgramView, ...]
    covered: float
    shortfall: float = 0.0

    @property
    def ids(self) -> list[ProgramId]:
        return [p.program_id for p in self.programs]


def _pause_key(view: ProgramView) -> tuple[float, int, str]:
    # Later acting_since first among equals; Reasoning programs have none
    since = view.acting_since if view.acting_since is not None else 0
    return (-pause_score(view.context_tokens, view.phase), -since, view.program_id)


def select_evictions(
    candidates: Sequence[ProgramView],
    delta_c: float,
    *,
    decay: DecaySpec | None = None,
    now: int = 0,
    interval: int = 1,
    strict: bool = True,
) -> EvictionSelection:
    """
    Choose programs to pause, Acting before Reasoning, smallest first.

    Each candidate covers its effective weight (its full context without a
    decay). Selection stops as soon as the cumulative weight reaches
    ``delta_c``. When the chosen prefix covers ``delta_c`` exactly its Σc²
    is the minimum over every covering subset; otherwise it is the minimum
    among subsets of the same size, and a single larger program may be
    cheaper.

    Raises:
        Shortfall: all candidates together cannot cover ``delta_c`` and
            ``strict`` is set.
    """
    if delta_c <= 0:
        return EvictionSelection((), 0.0)

    chosen: list[ProgramView] = []
    covered = 0.0
    for view in sorted(candidates, key=_pause_key):
        if covered >= delta_c:
            break
        chosen.append(view)
        covered += (
            program_weight(view, decay, now, interval)
            if decay is not None
            else view.context_tokens
        )

    shortfall = max(0.0, delta_c - covered)
    if shortfall > 0 and strict:
        raise Shortfall(
            f"candidates cover {covered:g} of {delta_c:g} tokens",
            remaining=shortfall,
            selected=[p.program_id for p in chosen],
        )
    return EvictionSelection(tuple(chosen), covered, shortfall)


def growth_fits(
    backend: BackendView,
    program_id: ProgramId,
    tokens: int,
    config: SchedulerConfig,
    now: int,
) -> bool:
    """
    Whether ``program_id`` may take ``tokens`` more on ``backend``.

    The program counts at full weight once its result is in; results already
    waiting on the backend keep their claim.
    """
    load = float(backend.stalled_tokens + tokens)
    for p in backend.programs:
        if p.program_id == program_id:
            load += p.context_tokens
        else:
            load += program_weight(p, config.decay, now, config.delta_t) + p.held_tokens
    return load <= config.lambda_max * backend.capacity_tokens


class Evicts(Protocol):
    def evict(self, program_id: ProgramId, now: int, cause: EvictionCause) -> int: ...


def pause_cause(phase: ProgramPhase) -> EvictionCause:
    if phase is ProgramPhase.ACTING:
        return EvictionCause.ACTING_PAUSE
    return EvictionCause.REASONING_PAUSE


def pause(
    program: AgentProgram,
    now: int,
    *,
    backend: Evicts | None = None,
    queue: GlobalWaitQueue | None = None,
    cause: EvictionCause | None = None,
) -> AgentProgram:
    """
    Unbind an active program from its backend and queue it.

    Raises:
        IllegalTransition: the program is Paused or Stopped.
    """
    if not program.is_active:
        raise IllegalTransition(
            f"cannot pause {program.status.kind.value} program {program.id}",
            program_id=program.id,
        )
    paused = apply_event(program, PauseRequested(), now)
    if backend is not None:
        backend.evict(program.id, now, cause or pause_cause(program.phase))
    if queue is not None:
        queue.push_program(paused, now)
    return paused


def restore(
    program: AgentProgram,
    backend: BackendView,
    config: SchedulerConfig,
    now: int,
    *,
    queue: GlobalWaitQueue | None = None,
    reserved_tokens: int = 0,
) -> AgentProgram:
    """
    Admit a paused program to ``backend`` if it keeps the backend under the watermark.

    ``reserved_tokens`` is decode the program will add before its next tool call.

    Raises:
        CapacityExceeded: the program would push the effective load past lambda_max.
        IllegalTransition: the program is not Paused.
    """
    if not program.is_paused:
        raise IllegalTransition(
            f"cannot restore {program.status.kind.value} program {program.id}",
            program_id=program.id,
        )
    load = (
        effective_load(backend.programs, config.decay, now, config.delta_t)
        + sum(p.held_tokens for p in backend.programs)
        + backend.stalled_tokens
    )
    limit = config.lambda_max * backend.capacity_tokens
    demand = program.context_tokens + reserved_tokens
    if load + demand > limit:
        raise CapacityExceeded(
            f"program {program.id} ({demand} tokens) does not fit "
            f"on {backend.backend_id} (load {load:g}, limit {limit:g})",
            program_id=program.id,
            backend_id=backend.backend_id,
        )
    restored = apply_event(program, RestoreGranted(backend.backend_id), now)
    if queue is not None:
        queue.remove(program.id)
    return restored


def _pause_all(
    decisions: list[ScheduleDecision],
    chosen: set[ProgramId],
    backend_id: str,
    selection: EvictionSelection,
) -> None:
    for p in selection.programs:
        decisions.append(ScheduleDecision.pause(p.program_id, backend_id, pause_cause(p.phase)))
        chosen.add(p.program_id)


def schedule_tick(
    backends: Sequence[BackendView],
    queue: Sequence[QueueEntry],
    config: SchedulerConfig,
    now: int,
    *,
    affinity: Mapping[ProgramId, str] | None = None,
) -> ScheduleBatch:
    """
    One monitor pass over a cluster snapshot.

    Pauses come first, per backend under pressure, and only ever take Acting
    programs: pressure they cannot cover waits for running turns to end. A
    backend whose every program is Acting while a tool result waits for
    room pauses the cheapest Acting programs until the smallest waiting
    result fits. Then the queue is scanned in restore order and every
    program that fits somewhere is placed on the least-loaded eligible
    backend. Views older than ``delta_t`` are ignored. ``affinity`` pins
    programs to one backend.
    """
    decay, interval = config.decay, config.delta_t
    decisions: list[ScheduleDecision] = []
    loads: dict[str, float] = {}
    fresh = [
        b for b in backends if b.healthy and b.taken_at >= now - config.delta_t
    ]

    for view in fresh:
        limit = config.lambda_max * view.capacity_tokens
        load = effective_load(view.programs, decay, now, interval) + view.stalled_tokens
        acting = [p for p in view.programs if p.phase is ProgramPhase.ACTING]
        chosen: set[ProgramId] = set()

        need = thrashing_pressure(view.capacity_tokens, load, config.lambda_max)
        if need > 0:
            selection = select_evictions(
                acting, need, decay=decay, now=now, interval=interval, strict=False
            )
            _pause_all(decisions, chosen, view.backend_id, selection)
            load -= selection.covered
            if selection.shortfall > 0:
                logger.warning(
                    "Backend %s still %.0f tokens over with no acting program left to pause",
                    view.backend_id,
                    selection.shortfall,
                )

        held = [p for p in acting if p.held_tokens and p.program_id not in chosen]
        if held and all(p.phase is ProgramPhase.ACTING for p in view.programs):
            smallest = min(
                p.context_tokens - program_weight(p, decay, now, interval) + p.held_tokens
                for p in held
            )
            need = smallest - (limit - load)
            if need > 0:
                rest = [p for p in acting if p.program_id not in chosen]
                selection = select_evictions(
                    rest, need, decay=decay, now=now, interval=interval, strict=False
                )
                _pause_all(decisions, chosen, view.backend_id, selection)
                load -= selection.covered
                logger.debug(
                    "Backend %s stuck on held results; pausing %s",
                    view.backend_id,
                    selection.ids,
                )
        loads[view.backend_id] = load + sum(
            p.held_tokens for p in held if p.program_id not in chosen
        )

    order = {b.backend_id: i for i, b in enumerate(fresh)}
    for entry in queue:
        targets = [
            b
            for b in fresh
            if loads[b.backend_id] < config.lambda_min * b.capacity_tokens
            and loads[b.backend_id] + entry.demand <= config.lambda_max * b.capacity_tokens
        ]
        if affinity is not None and entry.program_id in affinity:
            targets = [b for b in targets if b.backend_id == affinity[entry.program_id]]
        if not targets:
            continue
        target = min(targets, key=lambda b: (loads[b.backend_id], order[b.backend_id]))
        decisions.append(ScheduleDecision.restore(entry.program_id, target.backend_id))
        loads[target.backend_id] += entry.demand

    return ScheduleBatch.of(now, decisions)


def oversized(
    entry: QueueEntry, backends: Sequence[BackendView], config: SchedulerConfig
) -> bool:
    """True when the program exceeds the high watermark of every backend."""
    return all(entry.demand > config.lambda_max * b.capacity_tokens for b in backends)


class ProgramAwarePolicy(BasePolicy):
    """Global-queue scheduling of whole programs with time-decayed load."""

    name = "program-aware"
    description = "Pause/restore whole programs from a global waiting queue"
    engine_preempts = False

    @property
    def interval(self) -> int:
        return self.config.delta_t

    def _affinity(self) -> Mapping[ProgramId, str] | None:
        return None

    def schedule(
        self,
        now: int,
        backends: Sequence[BackendView],
        queue: GlobalWaitQueue,
    ) -> ScheduleBatch:
        entries = queue.ordered()
        batch = schedule_tick(backends, entries, self.config, now, affinity=self._affinity())

        restored = {d.program_id for d in batch.restores}
        for entry in entries:
            if entry.program_id not in restored and oversized(entry, backends, self.config):
                count = queue.mark_starved(entry.program_id)
                if count == 1 or count % 100 == 0:
                    logger.warning(
                        "Program %s (%d tokens) exceeds every backend watermark; "
                        "starved for %d passes",
                        entry.program_id,
                        entry.demand,
                        count,
                    )
        if not batch.is_noop:
            logger.debug(
                "Tick %d: %d pauses, %d restores",
                now,
                len(batch.pauses),
                len(batch.restores),
            )
        return batch

    def guard(self, now: int, backends: Sequence[BackendView]) -> ScheduleBatch | None:
        if not self.config.per_step_guard:
            return None
        batch = schedule_tick(backends, [], self.config, now)
        return None if batch.is_noop else batch

    def admits_growth(
        self, now: int, backend: BackendView, program_id: ProgramId, tokens: int
    ) -> bool:
        return growth_fits(backend, program_id, tokens, self.config, now)

    def reclaim_order(
        self, backend_id: str, idle: Mapping[ProgramId, int], now: int
    ) -> list[ProgramId]:
        # Decayed caches are already discounted; f = 1 keeps them reserved
        if not self.config.decay.decays:
            return []
        return sorted(idle, key=lambda pid: (idle[pid], pid))
