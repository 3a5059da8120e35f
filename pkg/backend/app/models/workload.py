"""Workload traces and experiment specifications."""

import hashlib
import json
from typing import Literal

from app.core.config import EngineConfig
from app.models.tools import EnvProfile
from pydantic import BaseModel, Field, model_validator


class StepScript(BaseModel):
    """One reasoning-then-acting step with its pre-drawn randomness."""

    reasoning_tokens: int = Field(ge=0)
    tool_latency: int = Field(ge=1)
    result_tokens: int = Field(ge=0)


class ProgramScript(BaseModel):
    program_id: str
    prompt_tokens: int = Field(ge=0)
    profile: str
    env: EnvProfile
    steps: list[StepScript] = Field(min_length=1)
    arrival_tick: int | None = None

    @property
    def scripted_tokens(self) -> int:
        """Every token the program emits or receives over its lifetime."""
        return self.prompt_tokens + sum(
            s.reasoning_tokens + s.result_tokens for s in self.steps
        )


class ArrivalSpec(BaseModel):
    """Closed loop keeps ``concurrency`` programs in flight; open loop uses scripted arrival ticks."""

    mode: Literal["closed", "open"] = "closed"
    concurrency: int | None = None
    rate_per_minute: float | None = None

    @model_validator(mode="after")
    def _check_mode(self) -> "ArrivalSpec":
        if self.mode == "closed" and self.concurrency is not None and self.concurrency < 1:
            raise ValueError("closed-loop concurrency must be >= 1")
        if self.mode == "open" and (self.rate_per_minute or 0) <= 0:
            raise ValueError("open-loop arrivals need rate_per_minute > 0")
        return self


class WorkloadTrace(BaseModel):
    seed: int
    preset: str
    programs: list[ProgramScript]
    arrival: ArrivalSpec = Field(default_factory=ArrivalSpec)

    @property
    def concurrency(self) -> int:
        if self.arrival.mode == "open":
            return len(self.programs)
        return self.arrival.concurrency or len(self.programs)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


class TraceOverrides(BaseModel):
    """Per-field replacements applied on top of a preset."""

    steps: tuple[int, int] | None = None
    prompt_tokens: tuple[int, int] | None = None
    reasoning_mean: float | None = None
    reasoning_sigma: float | None = None
    result_mean: float | None = None
    env: EnvProfile | None = None


class BackendFailure(BaseModel):
    """A backend that goes unhealthy during ``[down_at, up_at)``."""

    backend: int
    down_at: int
    up_at: int | None = None


PolicyName = Literal["program-aware", "request-aware", "ttl-pin", "pinned-routing"]


class ExperimentSpec(BaseModel):
    """Everything one simulator run depends on."""

    name: str = "run"
    policy: PolicyName = "program-aware"
    preset: str = "mini-swe"
    n_programs: int = 32
    seed: int = 0
    concurrency: int | None = None
    arrival_rate_per_minute: float | None = None
    overrides: TraceOverrides | None = None
    trace_path: str | None = None
    engine: EngineConfig = Field(default_factory=EngineConfig)
    duration_ticks: int | None = None
    failures: list[BackendFailure] = Field(default_factory=list)
    output_dir: str | None = None

    def spec_hash(self) -> str:
        """Stable digest of every field that affects the run."""
        payload = self.model_dump(mode="json", exclude={"output_dir", "name"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ComparisonRow(BaseModel):
    policy: str
    preset: str
    concurrency: int
    seed: int
    steps_per_min: float
    kv_hit_rate: float | None
    max_imbalance: float | None
    total_cost: int
    caching_cost: int
    recompute_cost: int
    step_latency_p50: float
    step_latency_p95: float
    completed_programs: int
    spec_hash: str


class TrendVerdict(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class ComparisonTable(BaseModel):
    rows: list[ComparisonRow]
    verdicts: list[TrendVerdict] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)
