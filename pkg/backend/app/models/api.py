"""Gateway request and response models."""

from typing import Any, Literal

from app.models.program import AgentProgram
from app.models.tools import ReclaimReport
from pydantic import BaseModel, ConfigDict, Field


class ChatRequest(BaseModel):
    """
    Completion-style request body.

    The program id travels in ``extra.program_id``; a top-level ``program_id``
    (what client SDKs produce from an ``extra_body``) is accepted as well.
    Every other key is forwarded untouched.
    """

    model_config = ConfigDict(extra="allow")

    model: str | None = None
    messages: list[dict[str, Any]] = Field(default_factory=list)
    extra: dict[str, Any] = Field(default_factory=dict)

    @property
    def program_id(self) -> str | None:
        value = self.extra.get("program_id")
        if value is None and self.model_extra:
            value = self.model_extra.get("program_id")
        return str(value) if value not in (None, "") else None


class ToolRunRequest(BaseModel):
    command: str
    sandbox: str | None = None
    program_id: str | None = None
    result_tokens: int | None = Field(default=None, ge=0)


class ToolRunResponse(BaseModel):
    program_id: str
    status: Literal["ok", "cancelled"]
    output: str = ""
    result_tokens: int = 0
    latency_ticks: int = 0
    prep_wait_ticks: int = 0


class ReleaseRequest(BaseModel):
    program_id: str


class ReleaseResponse(BaseModel):
    program_id: str
    status: Literal["released", "already_released"]
    reclaimed: ReclaimReport


class ProgramState(BaseModel):
    """Externally visible projection of one program."""

    program_id: str
    status: str
    phase: str
    context_tokens: int
    placement: str | None
    step_count: int
    total_tokens: int
    tool_envs: list[str]
    acting_since: int | None = None
    paused_since: int | None = None

    @classmethod
    def from_program(cls, program: AgentProgram) -> "ProgramState":
        return cls(
            program_id=program.id,
            status=program.status.kind.value,
            phase=program.phase.value,
            context_tokens=program.context_tokens,
            placement=program.placement,
            step_count=program.step_count,
            total_tokens=program.total_tokens,
            tool_envs=sorted(program.tool_envs),
            acting_since=program.status.acting_since,
            paused_since=program.status.paused_since,
        )
