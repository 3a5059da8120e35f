"""
Program registry.

The lifecycle state machine of agentic programs as pure functions, plus the
in-memory registry that owns the current version of every program.
"""

import logging
import threading
from collections.abc import Iterable, Iterator
from dataclasses import replace

from app.core.errors import DuplicateId, IllegalTransition, UnknownProgram
from app.models.program import (
    AgentProgram,
    PauseRequested,
    ProgramEvent,
    ProgramId,
    ProgramPhase,
    ProgramStatus,
    ReleaseRequested,
    RestoreGranted,
    StatusKind,
    TokensDecoded,
    ToolCallIssued,
    ToolResultReady,
)

logger = logging.getLogger(__name__)


def create_program(
    program_id: str,
    prompt_tokens: int,
    tool_specs: Iterable[str] = (),
    now: int = 0,
) -> AgentProgram:
    """
    Build a new program waiting for its first admission.

    Args:
        program_id: Unique identifier.
        prompt_tokens: Initial context length.
        tool_specs: Identifiers of the environments the program will use.
        now: Current tick, recorded as paused_since.

    Returns:
        A Paused program with no placement.
    """
    if prompt_tokens < 0:
        raise ValueError("prompt_tokens must be nonnegative")
    return AgentProgram(
        id=ProgramId(program_id),
        context_tokens=prompt_tokens,
        tool_envs=frozenset(tool_specs),
        status=ProgramStatus.paused(now),
        total_tokens=prompt_tokens,
    )


def _illegal(program: AgentProgram, event: ProgramEvent) -> IllegalTransition:
    edge = f"{program.status.kind.value} --{type(event).__name__}-->"
    return IllegalTransition(
        f"illegal transition {edge} for program {program.id}",
        program_id=program.id,
        status=program.status.kind.value,
        phase=program.phase.value,
        event=type(event).__name__,
    )


def apply_event(program: AgentProgram, event: ProgramEvent, now: int) -> AgentProgram:
    """
    Apply one event and return the updated program.

    Raises:
        IllegalTransition: the event is not legal in the program's status.
    """
    kind = program.status.kind
    if kind is StatusKind.STOPPED:
        raise _illegal(program, event)

    if isinstance(event, TokensDecoded):
        if kind is not StatusKind.REASONING:
            raise _illegal(program, event)
        return replace(
            program,
            context_tokens=program.context_tokens + event.n,
            total_tokens=program.total_tokens + event.n,
        )

    if isinstance(event, ToolCallIssued):
        # A paused program may still hand its call to the tool runner.
        if program.phase is not ProgramPhase.REASONING or kind is StatusKind.ACTING:
            raise _illegal(program, event)
        status = ProgramStatus.acting(now) if kind is StatusKind.REASONING else program.status
        return replace(
            program,
            phase=ProgramPhase.ACTING,
            status=status,
            step_count=program.step_count + 1,
            tool_started_at=now,
        )

    if isinstance(event, ToolResultReady):
        if program.phase is not ProgramPhase.ACTING:
            raise _illegal(program, event)
        status = ProgramStatus.reasoning() if kind is StatusKind.ACTING else program.status
        return replace(
            program,
            phase=ProgramPhase.REASONING,
            status=status,
            context_tokens=program.context_tokens + event.result_tokens,
            total_tokens=program.total_tokens + event.result_tokens,
            tool_started_at=None,
        )

    if isinstance(event, PauseRequested):
        if not program.status.is_active:
            raise _illegal(program, event)
        return replace(program, status=ProgramStatus.paused(now), placement=None)

    if isinstance(event, RestoreGranted):
        if kind is not StatusKind.PAUSED:
            raise _illegal(program, event)
        if program.phase is ProgramPhase.ACTING:
            since = program.tool_started_at if program.tool_started_at is not None else now
            status = ProgramStatus.acting(since)
        else:
            status = ProgramStatus.reasoning()
        return replace(program, status=status, placement=event.backend_id)

    if isinstance(event, ReleaseRequested):
        return replace(program, status=ProgramStatus.stopped(), placement=None)

    raise _illegal(program, event)


class ProgramRegistry:
    """
    Owner of every program known to one engine instance.

    Writers go through ``apply`` which holds a lock, so events for a program
    are applied one at a time; readers get immutable snapshots.
    """

    def __init__(self) -> None:
        self._programs: dict[ProgramId, AgentProgram] = {}
        self._lock = threading.Lock()

    def register(
        self,
        program_id: str,
        prompt_tokens: int,
        tool_specs: Iterable[str] = (),
        now: int = 0,
    ) -> AgentProgram:
        with self._lock:
            if program_id in self._programs:
                raise DuplicateId(
                    f"program {program_id} already registered", program_id=program_id
                )
            program = create_program(program_id, prompt_tokens, tool_specs, now)
            self._programs[program.id] = program
        logger.debug("Registered program %s with %d tokens", program_id, prompt_tokens)
        return program

    def get(self, program_id: str) -> AgentProgram:
        try:
            return self._programs[ProgramId(program_id)]
        except KeyError:
            raise UnknownProgram(
                f"unknown program {program_id}", program_id=program_id
            ) from None

    def apply(self, program_id: str, event: ProgramEvent, now: int) -> AgentProgram:
        with self._lock:
            program = self.get(program_id)
            updated = apply_event(program, event, now)
            self._programs[program.id] = updated
        return updated

    def commit(self, program: AgentProgram) -> AgentProgram:
        """Store a version produced by the pure transition helpers."""
        with self._lock:
            if program.id not in self._programs:
                raise UnknownProgram(f"unknown program {program.id}", program_id=program.id)
            self._programs[program.id] = program
        return program

    def add_tool_env(self, program_id: str, env_id: str) -> AgentProgram:
        with self._lock:
            program = self.get(program_id)
            updated = replace(program, tool_envs=program.tool_envs | {env_id})
            self._programs[program.id] = updated
        return updated

    def __contains__(self, program_id: object) -> bool:
        return program_id in self._programs

    def __iter__(self) -> Iterator[AgentProgram]:
        return iter(list(self._programs.values()))

    def __len__(self) -> int:
        return len(self._programs)

    def active(self) -> list[AgentProgram]:
        return [p for p in self._programs.values() if p.is_active]

    def on_backend(self, backend_id: str) -> list[AgentProgram]:
        return [p for p in self._programs.values() if p.placement == backend_id]
