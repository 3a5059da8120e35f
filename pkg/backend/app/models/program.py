"""Agentic program abstraction: identity, context, tools, placement, phase, status."""

from dataclasses import dataclass, field
from enum import Enum
from typing import NewType

ProgramId = NewType("ProgramId", str)


class ProgramPhase(str, Enum):
    """Execution phase of the current step."""

    REASONING = "reasoning"
    ACTING = "acting"


class StatusKind(str, Enum):
    """Scheduling status. Reasoning and Acting together are the active states."""

    REASONING = "reasoning"
    ACTING = "acting"
    PAUSED = "paused"
    STOPPED = "stopped"


@dataclass(frozen=True)
class ProgramStatus:
    """Status with its tick payload: acting_since for Acting, paused_since for Paused."""

    kind: StatusKind
    since: int | None = None

    @classmethod
    def reasoning(cls) -> "ProgramStatus":
        return cls(StatusKind.REASONING)

    @classmethod
    def acting(cls, since: int) -> "ProgramStatus":
        return cls(StatusKind.ACTING, since)

    @classmethod
    def paused(cls, since: int) -> "ProgramStatus":
        return cls(StatusKind.PAUSED, since)

    @classmethod
    def stopped(cls) -> "ProgramStatus":
        return cls(StatusKind.STOPPED)

    @property
    def is_active(self) -> bool:
        return self.kind in (StatusKind.REASONING, StatusKind.ACTING)

    @property
    def acting_since(self) -> int | None:
        return self.since if self.kind is StatusKind.ACTING else None

    @property
    def paused_since(self) -> int | None:
        return self.since if self.kind is StatusKind.PAUSED else None


@dataclass(frozen=True)
class AgentProgram:
    """
    One agent workflow as a scheduling unit.

    ``context_tokens`` is the KV footprint while active and only grows;
    ``placement`` is set exactly while the program is Reasoning or Acting.
    ``tool_started_at`` anchors the elapsed tool time of the current step and
    survives a pause so a restored Acting program keeps its decay clock.
    """

    id: ProgramId
    context_tokens: int
    tool_envs: frozenset[str] = field(default_factory=frozenset)
    placement: str | None = None
    phase: ProgramPhase = ProgramPhase.REASONING
    status: ProgramStatus = field(default_factory=lambda: ProgramStatus.paused(0))
    step_count: int = 0
    total_tokens: int = 0
    tool_started_at: int | None = None

    @property
    def is_active(self) -> bool:
        return self.status.is_active

    @property
    def is_paused(self) -> bool:
        return self.status.kind is StatusKind.PAUSED

    @property
    def is_stopped(self) -> bool:
        return self.status.kind is StatusKind.STOPPED


# Events


@dataclass(frozen=True)
class ToolCallIssued:
    tool_id: str = ""


@dataclass(frozen=True)
class ToolResultReady:
    result_tokens: int

    def __post_init__(self) -> None:
        if self.result_tokens < 0:
            raise ValueError("result_tokens must be nonnegative")


@dataclass(frozen=True)
class TokensDecoded:
    n: int

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ValueError("n must be nonnegative")


@dataclass(frozen=True)
class PauseRequested:
    pass


@dataclass(frozen=True)
class RestoreGranted:
    backend_id: str


@dataclass(frozen=True)
class ReleaseRequested:
    pass


ProgramEvent = (
    ToolCallIssued
    | ToolResultReady
    | TokensDecoded
    | PauseRequested
    | RestoreGranted
    | ReleaseRequested
)
