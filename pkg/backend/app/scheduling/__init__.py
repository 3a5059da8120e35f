"""
Scheduling policies.

Every policy implements BasePolicy:
- ProgramAwarePolicy: global-queue pause/restore of whole programs
- RequestAwarePolicy: turn-level admission with LRU eviction
- TtlPinPolicy: turn-level admission with TTL-pinned acting caches
- PinnedRoutingPolicy: watermark scheduling with fixed replica binding
"""

from app.core.config import BaselineConfig, SchedulerConfig
from app.scheduling.base import BasePolicy
from app.scheduling.baselines import (
    PinnedRoutingPolicy,
    RequestAwarePolicy,
    TtlPinPolicy,
)
from app.scheduling.decay import decay_eval
from app.scheduling.program_aware import (
    ProgramAwarePolicy,
    effective_load,
    growth_fits,
    pause,
    restore,
    schedule_tick,
    select_evictions,
    thrashing_pressure,
)
from app.scheduling.queue import GlobalWaitQueue

POLICIES: dict[str, type[BasePolicy]] = {
    ProgramAwarePolicy.name: ProgramAwarePolicy,
    RequestAwarePolicy.name: RequestAwarePolicy,
    TtlPinPolicy.name: TtlPinPolicy,
    PinnedRoutingPolicy.name: PinnedRoutingPolicy,
}


def create_policy(
    name: str,
    config: SchedulerConfig | None = None,
    baselines: BaselineConfig | None = None,
) -> BasePolicy:
    """Instantiate a policy by its registered name."""
    policy_class = POLICIES.get(name)
    if policy_class is None:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}")
    return policy_class(config, baselines)


__all__ = [
    "BasePolicy",
    "GlobalWaitQueue",
    "PinnedRoutingPolicy",
    "POLICIES",
    "ProgramAwarePolicy",
    "RequestAwarePolicy",
    "TtlPinPolicy",
    "create_policy",
    "decay_eval",
    "effective_load",
    "growth_fits",
    "pause",
    "restore",
    "schedule_tick",
    "select_evictions",
    "thrashing_pressure",
]
