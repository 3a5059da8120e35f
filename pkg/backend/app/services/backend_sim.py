"""
Simulated data-parallel inference replica.

One KV pool of ``capacity_tokens``; chunked prefill at ``chunk`` tokens per
tick shared FIFO across prefill jobs; decode at one token per program per
tick. Every tick each resident program is charged exactly one STP sample.
"""

import itertools
import logging
from collections import deque
from collections.abc import Callable, Mapping
from dataclasses import dataclass

from app.core.errors import AlreadyResident, ConfigError, NotResident, PoolOverflow
from app.models.backend import BackendSnapshot, CacheConfig, SimEvent, SimEventKind
from app.models.cost import CostComponent, EvictionCause, StpSample
from app.models.program import ProgramId
from app.services.cost_ledger import CostLedger

logger = logging.getLogger(__name__)

ReclaimOrder = Callable[[str, Mapping[ProgramId, int], int], list[ProgramId]]


def _no_reclaim(backend_id: str, idle: Mapping[ProgramId, int], now: int) -> list[ProgramId]:
    return []


@dataclass
class PrefillJob:
    """Uncached tokens of one admitted program, recompute before new."""

    program: ProgramId
    recompute: int
    new: int
    decode_budget: int | None
    cause: EvictionCause | None = None

    @property
    def remaining(self) -> int:
        return self.recompute + self.new


class SimBackend:
    """
    One replica's KV pool and execution state.

    ``decode_budget`` on admission is the number of tokens the program emits
    once its prefill finishes; ``None`` leaves the cache idle (an Acting
    program restored while its tool still runs).
    """

    def __init__(
        self,
        backend_id: str,
        capacity_tokens: int,
        chunk: int,
        ledger: CostLedger | None = None,
        *,
        log_decode_tokens: bool = False,
    ):
        if capacity_tokens < 1:
            raise ConfigError("capacity_tokens must be positive", backend=backend_id)
        if chunk < 1:
            raise ConfigError("chunk must be >= 1", backend=backend_id)
        self.backend_id = backend_id
        self.capacity_tokens = capacity_tokens
        self.chunk = chunk
        self.ledger = ledger if ledger is not None else CostLedger(keep_samples=False)
        self.log_decode_tokens = log_decode_tokens

        self.resident: dict[ProgramId, int] = {}
        self.prefill_queue: deque[PrefillJob] = deque()
        self.decoding: dict[ProgramId, int] = {}
        self.idle_since: dict[ProgramId, int] = {}
        self.healthy = True
        self.stalled = 0

        self.reclaim_order: ReclaimOrder = _no_reclaim
        self.preempt_decoders = False

        self._jobs: dict[ProgramId, PrefillJob] = {}
        self._decoded: dict[ProgramId, int] = {}
        self._admitted_at: dict[ProgramId, int] = {}
        self._seq = itertools.count()
        self._used = 0
        self._events: list[SimEvent] = []

    # Pool accounting

    @property
    def used(self) -> int:
        return self._used

    @property
    def free(self) -> int:
        return self.capacity_tokens - self._used

    @property
    def committed(self) -> int:
        """Resident tokens plus tokens still to be prefilled."""
        return self._used + sum(job.remaining for job in self.prefill_queue)

    @property
    def reserved(self) -> int:
        """Decode still owed to admitted turns."""
        pending = sum(job.decode_budget or 0 for job in self.prefill_queue)
        return pending + sum(self.decoding.values())

    def unused(self, held: int = 0) -> int:
        """Capacity no admitted work will fill; ``held`` is growth promised to waiting results."""
        return max(0, self.capacity_tokens - self.committed - self.reserved - held)

    def is_prefilling(self, program_id: str) -> bool:
        return program_id in self._jobs

    def is_idle(self, program_id: str) -> bool:
        return program_id in self.idle_since

    def attach(self, reclaim_order: ReclaimOrder, preempt_decoders: bool) -> None:
        self.reclaim_order = reclaim_order
        self.preempt_decoders = preempt_decoders

    def drain_events(self) -> list[SimEvent]:
        events, self._events = self._events, []
        return events

    def _emit(
        self,
        now: int,
        kind: SimEventKind,
        program: ProgramId | None,
        tokens: int = 0,
        cause: EvictionCause | None = None,
    ) -> SimEvent:
        event = SimEvent(now, kind, program, self.backend_id, tokens, cause)
        self._events.append(event)
        return event

    # Admission and eviction

    def admit(
        self,
        program_id: ProgramId,
        context_tokens: int,
        now: int,
        *,
        history_tokens: int = 0,
        decode_budget: int | None = None,
        cause: EvictionCause | None = None,
    ) -> SimEvent | None:
        """
        Schedule the uncached part of a program's context.

        A cached prefix of k tokens is a hit and only the new c - k tokens are
        prefilled. Without one, the ``history_tokens`` that were computed
        before are re-prefilled as Recompute (a miss) and the rest as Prefill.
        The default of 0 is a first admission: nothing was computed yet, so
        the whole context is Prefill. A program evicted at c tokens comes
        back with ``history_tokens=c`` and pays Recompute(c).

        Raises:
            AlreadyResident: the program is already prefilling or decoding here.
        """
        if program_id in self.decoding or program_id in self._jobs:
            raise AlreadyResident(
                f"{program_id} is already running on {self.backend_id}",
                program_id=program_id,
                backend_id=self.backend_id,
            )

        cached = self.resident.get(program_id, 0)
        resume: SimEvent | None = None
        if cached > 0:
            recompute, new = 0, max(0, context_tokens - cached)
            resume = self._emit(now, SimEventKind.RESUME_HIT, program_id, cached)
            self.ledger.record_resume(hit_tokens=cached)
        else:
            recompute = min(history_tokens, context_tokens)
            new = context_tokens - recompute
            if recompute:
                resume = self._emit(now, SimEventKind.RESUME_MISS, program_id, recompute, cause)
                self.ledger.record_resume(miss_tokens=recompute)

        self.resident.setdefault(program_id, 0)
        self.idle_since.pop(program_id, None)
        self._admitted_at[program_id] = next(self._seq)

        job = PrefillJob(program_id, recompute, new, decode_budget, cause)
        if job.remaining:
            self.prefill_queue.append(job)
            self._jobs[program_id] = job
        else:
            self._finish_prefill(job, now)
        return resume

    def extend(self, program_id: ProgramId, new_tokens: int, decode_budget: int | None) -> None:
        """Append tokens to a program that is still prefilling."""
        job = self._jobs.get(program_id)
        if job is None:
            raise NotResident(
                f"{program_id} has no prefill on {self.backend_id}", program_id=program_id
            )
        job.new += new_tokens
        job.decode_budget = decode_budget

    def grow(self, program_id: ProgramId, tokens: int) -> None:
        """Add tokens computed outside the tick model (the gateway's proxied completions)."""
        if program_id not in self.resident:
            raise NotResident(f"{program_id} is not resident", program_id=program_id)
        if tokens > self.free:
            raise PoolOverflow(
                f"{self.backend_id} cannot hold {tokens} more tokens",
                backend_id=self.backend_id,
            )
        self.resident[program_id] += tokens
        self._used += tokens

    def evict(self, program_id: ProgramId, now: int, cause: EvictionCause) -> int:
        """
        Drop a program's cache and any unfinished prefill.

        Raises:
            NotResident: nothing of the program is on this backend.
        """
        if program_id not in self.resident:
            raise NotResident(
                f"{program_id} is not resident on {self.backend_id}",
                program_id=program_id,
                backend_id=self.backend_id,
            )
        freed = self.resident.pop(program_id)
        self._used -= freed
        job = self._jobs.pop(program_id, None)
        if job is not None:
            self.prefill_queue.remove(job)
        self.decoding.pop(program_id, None)
        self.idle_since.pop(program_id, None)
        self._admitted_at.pop(program_id, None)
        self._emit(now, SimEventKind.EVICTION_PERFORMED, program_id, freed, cause)
        logger.debug("%s evicted %s (%d tokens, %s)", self.backend_id, program_id, freed, cause.value)
        return freed

    def take_decoded(self, program_id: ProgramId) -> int:
        """Tokens decoded for a program since the last call."""
        return self._decoded.pop(program_id, 0)

    def pending_decoded(self, program_id: ProgramId) -> int:
        return self._decoded.get(program_id, 0)

    def _finish_prefill(self, job: PrefillJob, now: int) -> None:
        if job.decode_budget is None:
            self.idle_since[job.program] = now
        elif job.decode_budget > 0:
            self.decoding[job.program] = job.decode_budget
        else:
            self.idle_since[job.program] = now
            self._emit(
                now,
                SimEventKind.STEP_EMISSION_COMPLETE,
                job.program,
                self.resident[job.program],
            )

    def _obtain(self, need: int, now: int, requester: ProgramId, for_decode: bool) -> int:
        """Free memory for ``requester``, reclaiming idle caches and, for decode, preempting."""
        while self.free < need:
            idle = {p: t for p, t in self.idle_since.items() if p != requester}
            victims = self.reclaim_order(self.backend_id, idle, now) if idle else []
            if victims:
                self.evict(victims[0], now, EvictionCause.ENGINE_RECLAIM)
                continue
            if for_decode and self.preempt_decoders and self.decoding:
                victim = max(self.decoding, key=lambda p: self._admitted_at[p])
                self.evict(victim, now, EvictionCause.ENGINE_PREEMPT)
                if victim == requester:
                    return 0
                continue
            break
        return min(need, max(self.free, 0))

    # Execution

    def advance(self, now: int) -> list[SimEvent]:
        """Run one tick: decode, then prefill, then charge every resident program."""
        self.stalled = 0
        decoded: set[ProgramId] = set()
        prefilled: dict[ProgramId, tuple[bool, EvictionCause | None]] = {}

        for pid in list(self.decoding):
            if pid not in self.decoding:
                continue
            if self._obtain(1, now, pid, True) < 1:
                if pid in self.decoding:
                    self.stalled += 1
                continue
            self.resident[pid] += 1
            self._used += 1
            self._decoded[pid] = self._decoded.get(pid, 0) + 1
            decoded.add(pid)
            self.ledger.record(
                StpSample(pid, self.backend_id, CostComponent.DECODE, self.resident[pid], tick=now)
            )
            if self.log_decode_tokens:
                self._emit(now, SimEventKind.DECODE_TOKEN, pid, 1)
            left = self.decoding[pid] - 1
            if left == 0:
                del self.decoding[pid]
                self.idle_since[pid] = now
                self._emit(now, SimEventKind.STEP_EMISSION_COMPLETE, pid, self.resident[pid])
            else:
                self.decoding[pid] = left

        budget = self.chunk
        while budget > 0 and self.prefill_queue:
            job = self.prefill_queue[0]
            want = min(budget, job.remaining)
            got = self._obtain(want, now, job.program, False)
            if got <= 0:
                break
            recomputed = min(got, job.recompute)
            job.recompute -= recomputed
            job.new -= got - recomputed
            self.resident[job.program] += got
            self._used += got
            budget -= got
            seen, _ = prefilled.get(job.program, (False, None))
            prefilled[job.program] = (seen or recomputed > 0, job.cause)
            self._emit(now, SimEventKind.PREFILL_CHUNK_DONE, job.program, got)
            if job.remaining == 0:
                self.prefill_queue.popleft()
                del self._jobs[job.program]
                self._finish_prefill(job, now)
            elif got < want:
                break

        for pid, (recomputed, cause) in prefilled.items():
            if pid not in self.resident:
                continue
            component = CostComponent.RECOMPUTE if recomputed else CostComponent.PREFILL
            self.ledger.record(
                StpSample(
                    pid,
                    self.backend_id,
                    component,
                    self.resident[pid],
                    tick=now,
                    cause=cause if recomputed else None,
                )
            )
        for pid, tokens in self.resident.items():
            if tokens and pid not in decoded and pid not in prefilled:
                self.ledger.record(
                    StpSample(pid, self.backend_id, CostComponent.CACHING, tokens, tick=now)
                )

        if self._used > self.capacity_tokens:
            raise PoolOverflow(
                f"{self.backend_id} holds {self._used} of {self.capacity_tokens} tokens",
                backend_id=self.backend_id,
            )
        return self.drain_events()

    # Health

    def fail(self) -> list[ProgramId]:
        """Mark the replica down; returns the programs that must move."""
        self.healthy = False
        return list(self.resident)

    def recover(self) -> None:
        self.healthy = True

    def snapshot(self, now: int, url: str | None = None) -> BackendSnapshot:
        return BackendSnapshot(
            backend_id=self.backend_id,
            url=url,
            healthy=self.healthy,
            cache_config=CacheConfig(capacity_tokens=self.capacity_tokens, chunk=self.chunk),
            active_program_tokens=self._used,
            taken_at=now,
        )
