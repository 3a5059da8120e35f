"""
Tool environment lifecycle.

Finite disk and port pools, environment preparation (synchronous or ahead
of restore), tool execution timing, and release hooks tied to program
termination.
"""

import logging
from dataclasses import dataclass

import numpy as np
from app.core.config import PoolConfig
from app.core.errors import (
    AlreadyPreparing,
    DiskExhausted,
    EnvNotReady,
    PortsExhausted,
    ProgramStillActive,
    WrongOwner,
)
from app.models.program import AgentProgram, ProgramId
from app.models.tools import (
    EnvProfile,
    OrphanRecord,
    PrepState,
    ReclaimReport,
    ResourcePools,
    ToolEnvironment,
)
from app.services.program_registry import ProgramRegistry
from app.services.samplers import LatencySampler

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToolRun:
    """Timing of one tool execution."""

    env_id: str
    issued_at: int
    started_at: int
    done_at: int

    @property
    def prep_wait(self) -> int:
        return self.started_at - self.issued_at


class ToolManager:
    """Owns every simulated sandbox and the pools they draw from."""

    def __init__(self, pools: PoolConfig | None = None, hooks_enabled: bool = True):
        pools = pools or PoolConfig()
        self.pools = ResourcePools(
            disk_capacity=pools.disk_capacity,
            port_range=range(pools.port_start, pools.port_start + pools.port_count),
        )
        self.hooks_enabled = hooks_enabled
        self.envs: dict[str, ToolEnvironment] = {}
        self._by_owner: dict[ProgramId, list[str]] = {}
        self._failing_releases: set[str] = set()
        self._used_first: set[str] = set()
        self.disk_peak = 0
        self.prep_overlap_savings = 0

    # Allocation

    def acquire_env(
        self,
        program_id: str,
        disk_units: int,
        prep_latency: int,
        now: int,
        profile: str = "default",
    ) -> ToolEnvironment:
        """
        Claim disk and one port for a new environment that starts preparing now.

        Raises:
            DiskExhausted: the disk pool cannot hold ``disk_units`` more.
            PortsExhausted: no port is free.
        """
        pools = self.pools
        if disk_units > pools.disk_free:
            raise DiskExhausted(
                f"disk pool exhausted: need {disk_units}, free {pools.disk_free}",
                pool="disk",
                requested=disk_units,
                free=pools.disk_free,
            )
        if not pools.ports_free:
            raise PortsExhausted("port pool exhausted", pool="ports")

        owner = ProgramId(program_id)
        owned = self._by_owner.setdefault(owner, [])
        env_id = f"env-{program_id}-{len(owned)}"
        port = min(pools.ports_free)
        pools.ports_free.discard(port)
        pools.disk_used += disk_units
        self.disk_peak = max(self.disk_peak, pools.disk_used)

        env = ToolEnvironment(
            env_id=env_id,
            owner=owner,
            disk_units=disk_units,
            port=port,
            prep_latency=prep_latency,
            profile=profile,
            ready_at=now + prep_latency,
            acquired_at=now,
        )
        env.refresh(now)
        self.envs[env_id] = env
        owned.append(env_id)
        logger.debug("Acquired %s for %s (disk %d, port %d)", env_id, owner, disk_units, port)
        return env

    def acquire_profile(
        self, program_id: str, profile: EnvProfile, now: int, name: str = "default"
    ) -> ToolEnvironment:
        return self.acquire_env(
            program_id, profile.disk_units, profile.prep_latency, now, profile=name
        )

    def env_for(self, program_id: str) -> ToolEnvironment | None:
        """The program's live environment, if it has one."""
        for env_id in self._by_owner.get(ProgramId(program_id), []):
            env = self.envs[env_id]
            if env.state is not PrepState.RELEASED:
                return env
        return None

    def prepare_async(
        self, program_id: str, profile: EnvProfile, now: int, name: str = "default"
    ) -> ToolEnvironment:
        """
        Start preparing the program's environment ahead of its first tool call.

        Raises:
            AlreadyPreparing: the program already has a live environment.
        """
        existing = self.env_for(program_id)
        if existing is not None:
            raise AlreadyPreparing(
                f"{existing.env_id} already {existing.state.value}",
                env_id=existing.env_id,
            )
        return self.acquire_profile(program_id, profile, now, name)

    # Execution

    def execute_tool(
        self,
        env: ToolEnvironment,
        program_id: str,
        latency: LatencySampler | int,
        now: int,
        rng: np.random.Generator | None = None,
        wait_for_prep: bool = True,
    ) -> ToolRun:
        """
        Run one tool call in ``env``.

        A call against a still-preparing environment waits out the residual
        preparation time when ``wait_for_prep`` is set and raises otherwise.

        Raises:
            WrongOwner: ``env`` belongs to another program.
            EnvNotReady: the environment is released, or preparing without waiting.
        """
        if env.owner != program_id:
            raise WrongOwner(
                f"{env.env_id} is owned by {env.owner}",
                env_id=env.env_id,
                owner=env.owner,
                caller=program_id,
            )
        env.refresh(now)
        if env.state is PrepState.RELEASED:
            raise EnvNotReady(f"{env.env_id} was released", env_id=env.env_id)

        residual = env.residual(now)
        if residual and not wait_for_prep:
            raise EnvNotReady(
                f"{env.env_id} ready in {residual} ticks",
                env_id=env.env_id,
                residual=residual,
            )

        if env.env_id not in self._used_first:
            self._used_first.add(env.env_id)
            self.prep_overlap_savings += env.prep_latency - residual

        if isinstance(latency, LatencySampler):
            if rng is None:
                raise ValueError("a sampler needs an rng")
            duration = latency.draw(rng)
        else:
            duration = max(1, int(latency))
        started = now + residual
        return ToolRun(env.env_id, now, started, started + duration)

    # Release

    def inject_release_failure(self, env_id: str) -> None:
        self._failing_releases.add(env_id)

    def release_hooks(self, program: AgentProgram) -> ReclaimReport:
        """
        Release every environment owned by a stopped program.

        Idempotent: a second call reclaims nothing.

        Raises:
            ProgramStillActive: the program has not been stopped.
        """
        if not program.is_stopped:
            raise ProgramStillActive(
                f"program {program.id} is {program.status.kind.value}",
                program_id=program.id,
            )

        report = ReclaimReport(program_id=program.id)
        for env_id in self._by_owner.get(program.id, []):
            env = self.envs[env_id]
            if env.state is PrepState.RELEASED:
                continue
            if env_id in self._failing_releases:
                logger.warning("Release of %s failed; environment leaked", env_id)
                continue
            report.disk_units += env.disk_units
            report.ports += 1 if env.port is not None else 0
            report.envs.append(env_id)
            self._release(env)
        if report.envs:
            logger.debug(
                "Reclaimed %d disk units and %d ports from %s",
                report.disk_units,
                report.ports,
                program.id,
            )
        return report

    def on_program_stopped(self, program: AgentProgram) -> ReclaimReport:
        """Termination hook; a no-op when hooks are disabled."""
        if not self.hooks_enabled:
            return ReclaimReport(program_id=program.id)
        return self.release_hooks(program)

    def _release(self, env: ToolEnvironment) -> None:
        self.pools.disk_used -= env.disk_units
        if env.port is not None:
            self.pools.ports_free.add(env.port)
        env.disk_units = 0
        env.port = None
        env.state = PrepState.RELEASED

    # Audits

    def leak_audit(self, registry: ProgramRegistry) -> list[OrphanRecord]:
        """Environments still holding resources after their owner stopped."""
        orphans = []
        for env in self.envs.values():
            if env.state is PrepState.RELEASED or env.owner not in registry:
                continue
            if registry.get(env.owner).is_stopped:
                orphans.append(
                    OrphanRecord(
                        env_id=env.env_id,
                        owner=env.owner,
                        disk_units=env.disk_units,
                        port=env.port,
                        state=env.state,
                    )
                )
        return orphans

    def live_disk(self) -> int:
        return sum(
            e.disk_units for e in self.envs.values() if e.state is not PrepState.RELEASED
        )

    def check_conservation(self) -> None:
        live = [e for e in self.envs.values() if e.state is not PrepState.RELEASED]
        assert self.pools.disk_used == sum(e.disk_units for e in live)
        ports = [e.port for e in live]
        assert len(ports) == len(set(ports))
        assert self.pools.disk_used <= self.pools.disk_capacity
