"""Scheduler-facing data models: decay specs, queue entries and decisions."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Literal

from app.core.errors import InvalidSpec
from app.models.cost import EvictionCause
from app.models.program import ProgramId, ProgramPhase
from pydantic import BaseModel, ConfigDict, model_validator


class DecaySpec(BaseModel):
    """
    Time-decay weight f(t) applied to an Acting program's tokens.

    ``constant`` is f ≡ 1, ``geometric`` is base^-t and ``exponential`` is
    e^(-rate·t). The scheduler measures t in monitor intervals: whole
    elapsed intervals for ``geometric``, fractional ones for ``exponential``.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["constant", "geometric", "exponential"] = "geometric"
    base: float | None = None
    rate: float | None = None

    @model_validator(mode="after")
    def _check_parameters(self) -> "DecaySpec":
        if self.kind == "geometric":
            if self.base is None or self.base <= 1:
                raise InvalidSpec("geometric decay needs base > 1", base=self.base)
        elif self.kind == "exponential":
            if self.rate is None or self.rate <= 0:
                raise InvalidSpec("exponential decay needs rate > 0", rate=self.rate)
        return self

    @classmethod
    def constant(cls) -> "DecaySpec":
        return cls(kind="constant")

    @classmethod
    def geometric(cls, base: float = 2.0) -> "DecaySpec":
        return cls(kind="geometric", base=base)

    @classmethod
    def exponential(cls, rate: float) -> "DecaySpec":
        return cls(kind="exponential", rate=rate)

    @property
    def decays(self) -> bool:
        return self.kind != "constant"

    def evaluate(self, t: float) -> float:
        if self.kind == "geometric":
            return self.base ** (-t)  # type: ignore[operator]
        if self.kind == "exponential":
            return math.exp(-self.rate * t)  # type: ignore[operator]
        return 1.0


class DecisionKind(str, Enum):
    PAUSE = "pause"
    RESTORE = "restore"
    NOOP = "noop"


@dataclass(frozen=True)
class ScheduleDecision:
    kind: DecisionKind
    program_id: ProgramId | None = None
    backend_id: str | None = None
    cause: EvictionCause | None = None

    @classmethod
    def pause(
        cls,
        program_id: ProgramId,
        backend_id: str,
        cause: EvictionCause | None = None,
    ) -> "ScheduleDecision":
        return cls(DecisionKind.PAUSE, program_id, backend_id, cause)

    @classmethod
    def restore(cls, program_id: ProgramId, backend_id: str) -> "ScheduleDecision":
        return cls(DecisionKind.RESTORE, program_id, backend_id)


NOOP = ScheduleDecision(DecisionKind.NOOP)


@dataclass(frozen=True)
class ScheduleBatch:
    """Ordered decisions emitted by one scheduler pass."""

    tick: int
    decisions: tuple[ScheduleDecision, ...] = (NOOP,)

    @classmethod
    def of(cls, tick: int, decisions: list[ScheduleDecision]) -> "ScheduleBatch":
        return cls(tick, tuple(decisions) if decisions else (NOOP,))

    @property
    def is_noop(self) -> bool:
        return all(d.kind is DecisionKind.NOOP for d in self.decisions)

    @property
    def pauses(self) -> list[ScheduleDecision]:
        return [d for d in self.decisions if d.kind is DecisionKind.PAUSE]

    @property
    def restores(self) -> list[ScheduleDecision]:
        return [d for d in self.decisions if d.kind is DecisionKind.RESTORE]


@dataclass(frozen=True)
class ProgramView:
    """
    What the scheduler sees of one placed program.

    ``reserved_tokens`` is the rest of a Reasoning program's current turn,
    weighed with its context. ``held_tokens`` is the growth of a tool result
    that came back but is not yet admitted; the program stays Acting until
    it is.
    """

    program_id: ProgramId
    context_tokens: int
    phase: ProgramPhase
    acting_since: int | None = None
    idle_since: int | None = None
    reserved_tokens: int = 0
    held_tokens: int = 0


@dataclass(frozen=True)
class BackendView:
    """A scheduler-side snapshot of one backend."""

    backend_id: str
    capacity_tokens: int
    programs: tuple[ProgramView, ...] = ()
    healthy: bool = True
    stalled_tokens: int = 0
    taken_at: int = 0


@dataclass(frozen=True)
class QueueEntry:
    program_id: ProgramId
    context_tokens: int
    phase: ProgramPhase
    paused_since: int
    reserved_tokens: int = 0

    @property
    def demand(self) -> int:
        """Tokens a restore must find room for."""
        return self.context_tokens + self.reserved_tokens
