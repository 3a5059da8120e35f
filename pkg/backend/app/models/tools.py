"""Tool environment, latency sampler and resource pool models."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Literal

from app.core.errors import InvalidSpec
from app.models.program import ProgramId
from pydantic import BaseModel, ConfigDict, Field, model_validator


class SamplerSpec(BaseModel):
    """
    Tool latency distribution in ticks.

    deterministic: always ``ticks``; exponential: memoryless with ``mean``;
    heavy_tailed: matches the ``p50``/``p95``/``p99`` quantiles, capped at ``cap``.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["deterministic", "exponential", "heavy_tailed"] = "deterministic"
    ticks: int | None = None
    mean: float | None = None
    p50: float | None = None
    p95: float | None = None
    p99: float | None = None
    cap: float | None = None

    @model_validator(mode="after")
    def _check_parameters(self) -> "SamplerSpec":
        if self.kind == "deterministic":
            if self.ticks is None or self.ticks < 1:
                raise InvalidSpec("deterministic sampler needs ticks >= 1")
        elif self.kind == "exponential":
            if self.mean is None or self.mean <= 0:
                raise InvalidSpec("exponential sampler needs mean > 0")
        else:
            points = (self.p50, self.p95, self.p99)
            if any(p is None for p in points):
                raise InvalidSpec("heavy_tailed sampler needs p50, p95 and p99")
            cap = self.cap if self.cap is not None else 4 * self.p99  # type: ignore[operator]
            if not 1 <= self.p50 <= self.p95 <= self.p99 <= cap:  # type: ignore[operator]
                raise InvalidSpec("quantiles must satisfy 1 <= p50 <= p95 <= p99 <= cap")
        return self

    @classmethod
    def deterministic(cls, ticks: int) -> "SamplerSpec":
        return cls(kind="deterministic", ticks=ticks)

    @classmethod
    def exponential(cls, mean: float) -> "SamplerSpec":
        return cls(kind="exponential", mean=mean)

    @classmethod
    def heavy_tailed(
        cls, p50: float, p95: float, p99: float, cap: float | None = None
    ) -> "SamplerSpec":
        return cls(kind="heavy_tailed", p50=p50, p95=p95, p99=p99, cap=cap)


class EnvProfile(BaseModel):
    """A named tool-environment preset."""

    disk_units: int = Field(default=2, ge=1)
    prep_latency: int = Field(default=0, ge=0)
    sampler: SamplerSpec = SamplerSpec.deterministic(8)


DEFAULT_PROFILES: dict[str, EnvProfile] = {
    "mini-swe": EnvProfile(
        disk_units=2, prep_latency=20, sampler=SamplerSpec.deterministic(8)
    ),
    "heavy-init": EnvProfile(
        disk_units=10, prep_latency=300, sampler=SamplerSpec.deterministic(30)
    ),
    "stochastic-tools": EnvProfile(
        disk_units=2,
        prep_latency=20,
        sampler=SamplerSpec.heavy_tailed(p50=10, p95=150, p99=600, cap=2400),
    ),
}


class PrepState(str, Enum):
    PREPARING = "preparing"
    READY = "ready"
    RELEASED = "released"


@dataclass
class ToolEnvironment:
    """A simulated sandbox owned by one program."""

    env_id: str
    owner: ProgramId
    disk_units: int
    port: int | None
    prep_latency: int
    profile: str = "default"
    state: PrepState = PrepState.PREPARING
    ready_at: int | None = None
    acquired_at: int = 0

    def refresh(self, now: int) -> None:
        if self.state is PrepState.PREPARING and self.ready_at is not None:
            if now >= self.ready_at:
                self.state = PrepState.READY

    def residual(self, now: int) -> int:
        """Ticks still to wait before the environment can run a tool."""
        if self.state is PrepState.PREPARING and self.ready_at is not None:
            return max(0, self.ready_at - now)
        return 0


@dataclass
class ResourcePools:
    """Finite disk and port pools shared by all environments."""

    disk_capacity: int
    port_range: range
    disk_used: int = 0
    ports_free: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not self.ports_free:
            self.ports_free = set(self.port_range)

    @property
    def disk_free(self) -> int:
        return self.disk_capacity - self.disk_used


class ReclaimReport(BaseModel):
    """Resources credited back to the pools by a release."""

    program_id: str
    disk_units: int = 0
    ports: int = 0
    envs: list[str] = []


class OrphanRecord(BaseModel):
    env_id: str
    owner: str
    disk_units: int
    port: int | None
    state: PrepState

