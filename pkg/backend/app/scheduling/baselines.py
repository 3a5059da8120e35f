"""
Comparison policies.

RequestAware serves each turn as an independent request, TtlPin pins an
acting program's cache for a predicted tool duration, and PinnedRouting runs
the watermark scheduler with every program bound to one replica.
"""

import itertools
import logging
from collections import defaultdict, deque
from collections.abc import Mapping, Sequence

from app.models.cost import EvictionCause
from app.models.program import ProgramId, ProgramPhase
from app.models.scheduling import BackendView, ScheduleBatch, ScheduleDecision
from app.scheduling.base import BasePolicy
from app.scheduling.program_aware import ProgramAwarePolicy
from app.scheduling.queue import GlobalWaitQueue

logger = logging.getLogger(__name__)


class RequestAwarePolicy(BasePolicy):
    """
    Turn-level admission with LRU cache eviction.

    Waiting turns are admitted first come first served whenever they fit in
    free plus reclaimable memory; idle caches survive only until memory is
    needed, and a decoder that runs out of memory preempts the most recently
    admitted decoder.
    """

    name = "request-aware"
    description = "Stateless per-request admission with LRU eviction"
    engine_preempts = True

    def _may_reclaim(self, program_id: ProgramId, now: int) -> bool:
        return True

    def _admit(
        self,
        now: int,
        backends: Sequence[BackendView],
        queue: GlobalWaitQueue,
        decisions: list[ScheduleDecision],
        evicted: set[ProgramId],
    ) -> None:
        healthy = [b for b in backends if b.healthy]
        if not healthy:
            return
        available = {}
        for view in healthy:
            committed = sum(
                p.context_tokens for p in view.programs if p.program_id not in evicted
            )
            reclaim = sum(
                p.context_tokens
                for p in view.programs
                if p.program_id not in evicted
                and p.idle_since is not None
                and self._may_reclaim(p.program_id, now)
            )
            available[view.backend_id] = (
                view.capacity_tokens - committed + reclaim - view.stalled_tokens
            )
        order = {b.backend_id: i for i, b in enumerate(healthy)}

        for entry in queue.fcfs():
            if entry.program_id in evicted:
                continue
            if entry.phase is ProgramPhase.ACTING:
                # Nothing to serve until the tool returns
                continue
            target = max(healthy, key=lambda b: (available[b.backend_id], -order[b.backend_id]))
            if entry.context_tokens > available[target.backend_id]:
                break
            decisions.append(ScheduleDecision.restore(entry.program_id, target.backend_id))
            available[target.backend_id] -= entry.context_tokens

    def schedule(
        self,
        now: int,
        backends: Sequence[BackendView],
        queue: GlobalWaitQueue,
    ) -> ScheduleBatch:
        decisions: list[ScheduleDecision] = []
        self._admit(now, backends, queue, decisions, set())
        return ScheduleBatch.of(now, decisions)

    def reclaim_order(
        self, backend_id: str, idle: Mapping[ProgramId, int], now: int
    ) -> list[ProgramId]:
        return sorted(idle, key=lambda pid: (idle[pid], pid))


class TtlPinPolicy(RequestAwarePolicy):
    """
    Request-level serving that pins an acting program's cache for a predicted TTL.

    The prediction is either a constant or the mean of the program's last few
    observed tool latencies. Expired pins are evicted; under decode pressure
    unpinned caches go first, then pinned ones, then decoders are preempted.
    """

    name = "ttl-pin"
    description = "Per-request serving with TTL-pinned acting caches"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.pinned_until: dict[ProgramId, int] = {}
        self._history: dict[ProgramId, deque[int]] = defaultdict(
            lambda: deque(maxlen=self.baselines.ttl_window)
        )

    def predict_ttl(self, program_id: ProgramId) -> int:
        history = self._history.get(program_id)
        if self.baselines.ttl_predictor == "lagged_mean" and history:
            return max(1, round(sum(history) / len(history)))
        return self.baselines.ttl_ticks

    def _may_reclaim(self, program_id: ProgramId, now: int) -> bool:
        return self.pinned_until.get(program_id, now) <= now

    def schedule(
        self,
        now: int,
        backends: Sequence[BackendView],
        queue: GlobalWaitQueue,
    ) -> ScheduleBatch:
        decisions: list[ScheduleDecision] = []
        expired: set[ProgramId] = set()
        for view in backends:
            if not view.healthy:
                continue
            for p in view.programs:
                if p.idle_since is None or p.phase is not ProgramPhase.ACTING:
                    continue
                until = self.pinned_until.get(p.program_id)
                if until is not None and until <= now:
                    decisions.append(
                        ScheduleDecision.pause(
                            p.program_id, view.backend_id, EvictionCause.TTL_EXPIRY
                        )
                    )
                    expired.add(p.program_id)
                    del self.pinned_until[p.program_id]
        self._admit(now, backends, queue, decisions, expired)
        return ScheduleBatch.of(now, decisions)

    def reclaim_order(
        self, backend_id: str, idle: Mapping[ProgramId, int], now: int
    ) -> list[ProgramId]:
        def key(pid: ProgramId) -> tuple[bool, int, str]:
            return (not self._may_reclaim(pid, now), idle[pid], pid)

        return sorted(idle, key=key)

    def on_tool_call(self, program_id: ProgramId, backend_id: str, now: int) -> None:
        self.pinned_until[program_id] = now + self.predict_ttl(program_id)

    def on_tool_result(self, program_id: ProgramId, latency: int, now: int) -> None:
        self._history[program_id].append(latency)
        self.pinned_until.pop(program_id, None)

    def on_release(self, program_id: ProgramId) -> None:
        self.pinned_until.pop(program_id, None)
        self._history.pop(program_id, None)


class PinnedRoutingPolicy(ProgramAwarePolicy):
    """Watermark scheduling with per-replica queues: each program keeps the replica it arrived on."""

    name = "pinned-routing"
    description = "Program-aware watermarks with round-robin replica binding"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.binding: dict[ProgramId, str] = {}
        self._counter = itertools.count()

    def _affinity(self) -> Mapping[ProgramId, str] | None:
        return self.binding

    def on_arrival(self, program_id: ProgramId, backend_ids: Sequence[str]) -> None:
        if program_id not in self.binding and backend_ids:
            self.binding[program_id] = backend_ids[next(self._counter) % len(backend_ids)]

    def on_release(self, program_id: ProgramId) -> None:
        self.binding.pop(program_id, None)
