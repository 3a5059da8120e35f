"""
Engine error hierarchy.

Every failure the engine reports carries a machine-readable ``code`` that
the HTTP layer and the CLI surface unchanged.
"""

from typing import Any


class EngineError(Exception):
    """Base class for all engine errors."""

    code: str = "EngineError"
    status_code: int = 400

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


# program-core


class DuplicateId(EngineError):
    code = "DuplicateId"
    status_code = 409


class IllegalTransition(EngineError):
    code = "IllegalTransition"
    status_code = 409


class UnknownProgram(EngineError):
    code = "UnknownProgram"
    status_code = 404


# cost-ledger


class InvalidChunk(EngineError):
    code = "InvalidChunk"


class NoPrefillActivity(EngineError):
    code = "NoPrefillActivity"
    status_code = 422


class FewerThanTwoBackends(EngineError):
    code = "FewerThanTwoBackends"
    status_code = 422


# scheduler


class InvalidSpec(EngineError):
    code = "InvalidSpec"


class Shortfall(EngineError):
    code = "Shortfall"
    status_code = 409


class CapacityExceeded(EngineError):
    code = "CapacityExceeded"
    status_code = 409


# backend-sim


class AlreadyResident(EngineError):
    code = "AlreadyResident"
    status_code = 409


class NotResident(EngineError):
    code = "NotResident"
    status_code = 404


class PoolOverflow(EngineError):
    code = "PoolOverflow"
    status_code = 500


class ConfigError(EngineError):
    code = "ConfigError"


# tool-manager


class DiskExhausted(EngineError):
    code = "DiskExhausted"
    status_code = 507


class PortsExhausted(EngineError):
    code = "PortsExhausted"
    status_code = 507


class AlreadyPreparing(EngineError):
    code = "AlreadyPreparing"
    status_code = 409


class EnvNotReady(EngineError):
    code = "EnvNotReady"
    status_code = 409


class WrongOwner(EngineError):
    code = "WrongOwner"
    status_code = 403


class ProgramStillActive(EngineError):
    code = "ProgramStillActive"
    status_code = 409


# gateway


class MissingProgramId(EngineError):
    code = "MissingProgramId"


class ProgramStopped(EngineError):
    code = "ProgramStopped"
    status_code = 410


class BackendUnhealthy(EngineError):
    code = "BackendUnhealthy"
    status_code = 503


class ParkTimeout(EngineError):
    """Retryable: the program is still waiting for a backend."""

    code = "ParkTimeout"
    status_code = 503


# workload-cli


class UnknownPreset(EngineError):
    code = "UnknownPreset"


class IncomparableReports(EngineError):
    code = "IncomparableReports"
    status_code = 422
