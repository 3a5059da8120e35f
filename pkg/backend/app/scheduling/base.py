"""
Base Policy Module.

Provides the abstract base class shared by the program-aware scheduler and
the comparison baselines, so the simulator and the gateway drive all of them
through one decision interface.
"""

from abc import ABC, abstractmethod
from collections.abc import Mapping, Sequence

from app.core.config import BaselineConfig, SchedulerConfig
from app.models.program import ProgramId
from app.models.scheduling import BackendView, ScheduleBatch
from app.scheduling.queue import GlobalWaitQueue


class BasePolicy(ABC):
    """
    Abstract base class for all scheduling policies.

    A policy decides at scheduling passes (``schedule``) and answers engine
    questions between passes:
    - which idle caches a backend may drop under memory pressure
    - whether a backend may preempt running decoders
    - whether a returning tool result may grow its cache right away
    - bookkeeping hooks on arrival, tool calls, tool results and release
    """

    name: str = "base"
    description: str = "Base policy"
    engine_preempts: bool = False

    def __init__(
        self,
        config: SchedulerConfig | None = None,
        baselines: BaselineConfig | None = None,
    ):
        """
        Initialize the policy.

        Args:
            config: Scheduler parameters.
            baselines: Knobs used by the comparison policies.
        """
        self.config = config or SchedulerConfig()
        self.baselines = baselines or BaselineConfig()

    @property
    def interval(self) -> int:
        """Ticks between scheduling passes."""
        return 1

    @abstractmethod
    def schedule(
        self,
        now: int,
        backends: Sequence[BackendView],
        queue: GlobalWaitQueue,
    ) -> ScheduleBatch:
        """
        Run one scheduling pass.

        Args:
            now: Current tick.
            backends: Fresh views of every backend, in cluster order.
            queue: The global waiting queue.

        Returns:
            Ordered pauses then restores; a Noop batch when nothing changes.
        """

    def guard(self, now: int, backends: Sequence[BackendView]) -> ScheduleBatch | None:
        """Optional pause-only check between passes."""
        return None

    def reclaim_order(
        self, backend_id: str, idle: Mapping[ProgramId, int], now: int
    ) -> list[ProgramId]:
        """Idle caches (program -> idle since) the engine may evict, first victim first."""
        return []

    def admits_growth(
        self, now: int, backend: BackendView, program_id: ProgramId, tokens: int
    ) -> bool:
        """Whether a resident program's tool result may grow its cache by ``tokens`` now."""
        return True

    def on_arrival(self, program_id: ProgramId, backend_ids: Sequence[str]) -> None:
        pass

    def on_tool_call(self, program_id: ProgramId, backend_id: str, now: int) -> None:
        pass

    def on_tool_result(self, program_id: ProgramId, latency: int, now: int) -> None:
        pass

    def on_release(self, program_id: ProgramId) -> None:
        pass

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r})"
