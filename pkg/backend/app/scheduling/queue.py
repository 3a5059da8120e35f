"""The global waiting queue shared by every backend."""

import logging
import threading
from collections.abc import Iterator
from dataclasses import replace

from app.models.program import AgentProgram, ProgramId, ProgramPhase
from app.models.scheduling import QueueEntry

logger = logging.getLogger(__name__)


def restore_score(context_tokens: int, phase: ProgramPhase) -> float:
    """Higher restores first: any Reasoning program outranks every Acting one."""
    return 1.0 / max(context_tokens, 1) + (1.0 if phase is ProgramPhase.REASONING else 0.0)


def pause_score(context_tokens: int, phase: ProgramPhase) -> float:
    """Higher pauses first: any Acting program outranks every Reasoning one."""
    return 1.0 / max(context_tokens, 1) + (1.0 if phase is ProgramPhase.ACTING else 0.0)


def restore_key(entry: QueueEntry) -> tuple[float, int, str]:
    return (-restore_score(entry.context_tokens, entry.phase), entry.paused_since, entry.program_id)


class GlobalWaitQueue:
    """
    Paused programs of the whole cluster.

    Order is by restore score, then earlier ``paused_since``, then id, so it
    does not depend on insertion order. Enqueue may come from any session;
    the scheduler drains it while holding the lock.
    """

    def __init__(self) -> None:
        self._entries: dict[ProgramId, QueueEntry] = {}
        self._lock = threading.Lock()
        self.starvation: dict[ProgramId, int] = {}

    def push(self, entry: QueueEntry) -> None:
        with self._lock:
            self._entries[entry.program_id] = entry

    def push_program(self, program: AgentProgram, now: int | None = None) -> QueueEntry:
        since = program.status.paused_since
        entry = QueueEntry(
            program_id=program.id,
            context_tokens=program.context_tokens,
            phase=program.phase,
            paused_since=since if since is not None else (now or 0),
        )
        self.push(entry)
        return entry

    def update(self, program: AgentProgram) -> None:
        """Refresh size and phase of a queued program, keeping its paused_since."""
        with self._lock:
            entry = self._entries.get(program.id)
            if entry is not None:
                self._entries[program.id] = replace(
                    entry, context_tokens=program.context_tokens, phase=program.phase
                )

    def reserve(self, program_id: str, tokens: int) -> None:
        """Set the decode a queued program brings with it on restore."""
        with self._lock:
            entry = self._entries.get(ProgramId(program_id))
            if entry is not None:
                self._entries[entry.program_id] = replace(entry, reserved_tokens=tokens)

    def remove(self, program_id: str) -> QueueEntry | None:
        with self._lock:
            self.starvation.pop(ProgramId(program_id), None)
            return self._entries.pop(ProgramId(program_id), None)

    def ordered(self) -> list[QueueEntry]:
        with self._lock:
            return sorted(self._entries.values(), key=restore_key)

    def fcfs(self) -> list[QueueEntry]:
        with self._lock:
            return sorted(
                self._entries.values(), key=lambda e: (e.paused_since, e.program_id)
            )

    def mark_starved(self, program_id: str) -> int:
        pid = ProgramId(program_id)
        count = self.starvation.get(pid, 0) + 1
        self.starvation[pid] = count
        return count

    def min_context(self) -> int | None:
        with self._lock:
            if not self._entries:
                return None
            return min(e.context_tokens for e in self._entries.values())

    def get(self, program_id: str) -> QueueEntry | None:
        return self._entries.get(ProgramId(program_id))

    def __contains__(self, program_id: object) -> bool:
        return program_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[QueueEntry]:
        return iter(self.ordered())
