"""Backend replica models: simulator events and polled snapshots."""

from dataclasses import dataclass
from enum import Enum
from typing import Any

from app.models.cost import EvictionCause
from app.models.program import ProgramId
from pydantic import BaseModel


class SimEventKind(str, Enum):
    PREFILL_CHUNK_DONE = "prefill_chunk_done"
    DECODE_TOKEN = "decode_token"
    STEP_EMISSION_COMPLETE = "step_emission_complete"
    EVICTION_PERFORMED = "eviction_performed"
    RESUME_HIT = "resume_hit"
    RESUME_MISS = "resume_miss"
    # Cluster-level lifecycle records
    PROGRAM_ARRIVED = "program_arrived"
    TOOL_CALL = "tool_call"
    TOOL_RESULT = "tool_result"
    PAUSED = "paused"
    RESTORED = "restored"
    RELEASED = "released"
    BACKEND_DOWN = "backend_down"
    BACKEND_UP = "backend_up"


@dataclass(frozen=True)
class SimEvent:
    """One totally ordered event-log record."""

    tick: int
    kind: SimEventKind
    program: ProgramId | None = None
    backend: str | None = None
    tokens: int = 0
    cause: EvictionCause | None = None

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "tick": self.tick,
            "kind": self.kind.value,
            "program": self.program,
            "backend": self.backend,
            "tokens": self.tokens,
        }
        if self.cause is not None:
            record["cause"] = self.cause.value
        return record


class CacheConfig(BaseModel):
    """Static KV pool descriptor fetched from a backend at startup."""

    capacity_tokens: int
    chunk: int = 512


class BackendSnapshot(BaseModel):
    """A timestamped poll result for one backend."""

    backend_id: str
    url: str | None = None
    healthy: bool = True
    cache_config: CacheConfig | None = None
    active_program_tokens: int = 0
    taken_at: int = 0
