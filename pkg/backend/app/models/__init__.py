"""Data models for the engine."""

from app.models.api import (
    ChatRequest,
    ProgramState,
    ReleaseRequest,
    ReleaseResponse,
    ToolRunRequest,
    ToolRunResponse,
)
from app.models.backend import BackendSnapshot, CacheConfig, SimEvent, SimEventKind
from app.models.cost import (
    CostComponent,
    EvictionCause,
    IntervalRow,
    LatencySummary,
    MetricsReport,
    StpSample,
)
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
from app.models.scheduling import (
    NOOP,
    BackendView,
    DecaySpec,
    DecisionKind,
    ProgramView,
    QueueEntry,
    ScheduleBatch,
    ScheduleDecision,
)
from app.models.tools import EnvProfile, PrepState, SamplerSpec, ToolEnvironment

__all__ = [
    "AgentProgram",
    "BackendSnapshot",
    "BackendView",
    "CacheConfig",
    "ChatRequest",
    "CostComponent",
    "DecaySpec",
    "DecisionKind",
    "EnvProfile",
    "EvictionCause",
    "IntervalRow",
    "LatencySummary",
    "MetricsReport",
    "NOOP",
    "PauseRequested",
    "PrepState",
    "ProgramEvent",
    "ProgramId",
    "ProgramPhase",
    "ProgramState",
    "ProgramStatus",
    "ProgramView",
    "QueueEntry",
    "ReleaseRequest",
    "ReleaseRequested",
    "ReleaseResponse",
    "RestoreGranted",
    "SamplerSpec",
    "ScheduleBatch",
    "ScheduleDecision",
    "SimEvent",
    "SimEventKind",
    "StatusKind",
    "StpSample",
    "TokensDecoded",
    "ToolCallIssued",
    "ToolEnvironment",
    "ToolResultReady",
    "ToolRunRequest",
    "ToolRunResponse",
]
