"""Space-time-product cost accounting models and the metrics report."""

from dataclasses import dataclass
from enum import Enum

from app.models.program import ProgramId
from pydantic import BaseModel, Field


class CostComponent(str, Enum):
    DECODE = "decode"
    PREFILL = "prefill"
    RECOMPUTE = "recompute"
    UNUSED = "unused"
    CACHING = "caching"


class EvictionCause(str, Enum):
    """Why a program's KV cache left a backend."""

    ACTING_PAUSE = "acting_pause"
    REASONING_PAUSE = "reasoning_pause"
    ENGINE_RECLAIM = "engine_reclaim"
    ENGINE_PREEMPT = "engine_preempt"
    TTL_EXPIRY = "ttl_expiry"
    FAILOVER = "failover"
    RELEASE = "release"

    @property
    def hits_reasoning(self) -> bool:
        """Evictions that take the cache away from a program mid-decode."""
        return self in (EvictionCause.REASONING_PAUSE, EvictionCause.ENGINE_PREEMPT)


@dataclass(frozen=True)
class StpSample:
    """``tokens`` held for ``duration`` ticks, attributed to one component."""

    program: ProgramId | None
    backend: str
    component: CostComponent
    tokens: int
    duration: int = 1
    tick: int = 0
    cause: EvictionCause | None = None

    def __post_init__(self) -> None:
        if self.tokens < 0:
            raise ValueError("tokens must be nonnegative")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.component is CostComponent.UNUSED and self.program is not None:
            raise ValueError("unused samples carry no program")

    @property
    def stp(self) -> int:
        return self.tokens * self.duration


class LatencySummary(BaseModel):
    """Distribution summary in ticks."""

    count: int = 0
    mean: float = 0.0
    p50: float = 0.0
    p95: float = 0.0
    p99: float = 0.0


class MetricsReport(BaseModel):
    """Headline metrics of one run or of the live gateway."""

    throughput_steps_per_min: float = 0.0
    kv_hit_rate: float | None = Field(default=None, ge=0.0, le=1.0)
    max_imbalance: float | None = None
    per_step_latency: LatencySummary = Field(default_factory=LatencySummary)
    first_step_latency: LatencySummary = Field(default_factory=LatencySummary)
    program_latency: LatencySummary = Field(default_factory=LatencySummary)
    cost_breakdown: dict[CostComponent, int] = Field(
        default_factory=lambda: {c: 0 for c in CostComponent}
    )
    total_cost: int = 0
    disk_peak: int = 0
    prep_overlap_savings: int = 0
    completed_steps: int = 0
    completed_programs: int = 0
    elapsed_ticks: int = 0
    evictions_by_cause: dict[EvictionCause, int] = Field(default_factory=dict)
    reasoning_eviction_recompute: int = 0


class IntervalRow(BaseModel):
    """One CSV row per backend per reporting interval."""

    tick: int
    backend: str
    resident_tokens: int
    decode: int
    prefill: int
    recompute: int
    unused: int
    caching: int
    hit_rate: float | None
    imbalance: float | None

    @classmethod
    def columns(cls) -> list[str]:
        return list(cls.model_fields)
