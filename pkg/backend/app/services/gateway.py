"""
Gateway engine.

Program-tagged chat completions, tool runs and releases on top of the
program-aware scheduler. Each configured backend is reached through an
adapter (the built-in simulator or any completion-style HTTP endpoint) and
mirrored by a SimBackend that holds the gateway's view of its KV residency.
A periodic tick polls the backends, runs the scheduler and wakes parked
requests whose program got a backend.
"""

import asyncio
import itertools
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Protocol

import httpx
from app.core.config import EngineConfig, GatewayBackend
from app.core.errors import (
    BackendUnhealthy,
    CapacityExceeded,
    ConfigError,
    DiskExhausted,
    IllegalTransition,
    MissingProgramId,
    ParkTimeout,
    PortsExhausted,
    ProgramStopped,
)
from app.models.api import (
    ChatRequest,
    ProgramState,
    ReleaseRequest,
    ReleaseResponse,
    ToolRunRequest,
    ToolRunResponse,
)
from app.models.backend import BackendSnapshot, SimEvent, SimEventKind
from app.models.cost import CostComponent, EvictionCause, MetricsReport, StpSample
from app.models.program import (
    ProgramId,
    ProgramPhase,
    ReleaseRequested,
    StatusKind,
    TokensDecoded,
    ToolCallIssued,
    ToolResultReady,
)
from app.models.scheduling import BackendView, ProgramView, ScheduleBatch
from app.models.tools import ReclaimReport
from app.scheduling import BasePolicy, GlobalWaitQueue, create_policy, pause, restore
from app.services.backend_sim import SimBackend
from app.services.cost_ledger import (
    CostLedger,
    max_imbalance,
    steps_per_minute,
    summarize_latencies,
)
from app.services.program_registry import ProgramRegistry
from app.services.samplers import GATEWAY_STREAM, LatencySampler, stream_rng
from app.services.tool_manager import ToolManager

logger = logging.getLogger(__name__)

CHARS_PER_TOKEN = 4


def estimate_tokens(value: Any) -> int:
    """Rough token count of a text or JSON-like payload."""
    text = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
    return max(1, math.ceil(len(text) / CHARS_PER_TOKEN))


def forward_payload(request: ChatRequest) -> dict[str, Any]:
    """The request body minus the program id, every other key untouched."""
    payload = request.model_dump(exclude_unset=True)
    payload.pop("program_id", None)
    extra = dict(payload.get("extra") or {})
    extra.pop("program_id", None)
    if extra:
        payload["extra"] = extra
    else:
        payload.pop("extra", None)
    return payload


def completion_tokens_of(raw: bytes) -> int:
    try:
        return int(json.loads(raw)["usage"]["completion_tokens"])
    except (ValueError, KeyError, TypeError):
        return 0


class BackendAdapter(Protocol):
    backend_id: str
    url: str

    async def complete(self, payload: dict[str, Any]) -> bytes: ...

    async def health(self) -> bool: ...

    async def aclose(self) -> None: ...


class SimBackendAdapter:
    """In-process stand-in for a completion endpoint with canned responses."""

    def __init__(self, backend_id: str, url: str, completion_tokens: int = 32):
        self.backend_id = backend_id
        self.url = url
        self.completion_tokens = completion_tokens
        self.healthy = True
        self.received: list[dict[str, Any]] = []
        self._ids = itertools.count()

    async def complete(self, payload: dict[str, Any]) -> bytes:
        if not self.healthy:
            raise BackendUnhealthy(f"{self.backend_id} is down", backend_id=self.backend_id)
        self.received.append(payload)
        tokens = int(payload.get("max_tokens") or self.completion_tokens)
        prompt = estimate_tokens(payload.get("messages", []))
        body = {
            "id": f"cmpl-{self.backend_id}-{next(self._ids)}",
            "object": "chat.completion",
            "model": payload.get("model"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": "ok " * tokens},
                    "finish_reason": "length",
                }
            ],
            "usage": {
                "prompt_tokens": prompt,
                "completion_tokens": tokens,
                "total_tokens": prompt + tokens,
            },
        }
        return json.dumps(body).encode()

    async def health(self) -> bool:
        return self.healthy

    async def aclose(self) -> None:
        pass


class HttpBackendAdapter:
    """Forwards completions to a real completion-style endpoint."""

    def __init__(
        self,
        backend_id: str,
        url: str,
        *,
        timeout: float = 60.0,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.backend_id = backend_id
        self.url = url
        self.client = httpx.AsyncClient(base_url=url, timeout=timeout, transport=transport)

    async def complete(self, payload: dict[str, Any]) -> bytes:
        try:
            response = await self.client.post("/v1/chat/completions", json=payload)
        except httpx.HTTPError as e:
            raise BackendUnhealthy(f"{self.url}: {e}", backend_id=self.backend_id) from e
        if response.status_code >= 500:
            raise BackendUnhealthy(
                f"{self.url} answered {response.status_code}", backend_id=self.backend_id
            )
        return response.content

    async def health(self) -> bool:
        try:
            response = await self.client.get("/health")
        except httpx.HTTPError:
            return False
        return response.status_code == 200

    async def aclose(self) -> None:
        await self.client.aclose()


def make_adapter(index: int, backend: GatewayBackend, engine: EngineConfig) -> BackendAdapter:
    backend_id = f"backend-{index}"
    if backend.url.startswith("sim://"):
        return SimBackendAdapter(backend_id, backend.url, engine.gateway.completion_tokens)
    return HttpBackendAdapter(
        backend_id, backend.url, timeout=engine.gateway.request_timeout_seconds
    )


@dataclass
class Replica:
    adapter: BackendAdapter
    mirror: SimBackend

    @property
    def backend_id(self) -> str:
        return self.mirror.backend_id


class ProgramGateway:
    """Scheduler-fronted gateway shared by every client session."""

    def __init__(
        self,
        engine: EngineConfig | None = None,
        adapters: Sequence[BackendAdapter] | None = None,
        policy: BasePolicy | None = None,
    ):
        self.engine = engine or EngineConfig()
        gateway = self.engine.gateway
        self.policy = policy or create_policy(
            "program-aware", self.engine.scheduler, self.engine.baselines
        )
        self.ledger = CostLedger(keep_samples=False)
        self.registry = ProgramRegistry()
        self.queue = GlobalWaitQueue()
        self.tools = ToolManager(self.engine.pools, self.engine.tools.hooks_enabled)

        if adapters is None:
            adapters = [make_adapter(i, b, self.engine) for i, b in enumerate(gateway.backends)]
        if not adapters:
            raise ConfigError("the gateway needs at least one backend")
        capacities = [b.capacity_tokens for b in gateway.backends]
        self.replicas: dict[str, Replica] = {}
        for i, adapter in enumerate(adapters):
            capacity = capacities[i] if i < len(capacities) else self.engine.cluster.capacity_tokens
            mirror = SimBackend(adapter.backend_id, capacity, self.engine.scheduler.chunk, self.ledger)
            # Completions run on the real engine; the gateway never preempts them
            mirror.attach(self._reclaim_order, False)
            self.replicas[adapter.backend_id] = Replica(adapter, mirror)

        profile_name = gateway.default_profile
        self.profile_name = profile_name
        self.profile = self.engine.tools.profiles[profile_name]
        self.sampler = LatencySampler(self.profile.sampler)
        self._rng = stream_rng(0, GATEWAY_STREAM)

        self.now = 0
        self.snapshots: dict[str, BackendSnapshot] = {}
        self.footprints: list[tuple[int, ...]] = []
        self.events: list[SimEvent] = []
        self._kv_seen: dict[ProgramId, int] = {}
        self._wakeups: dict[ProgramId, asyncio.Event] = {}
        self._tool_tasks: dict[ProgramId, asyncio.Task] = {}
        self._inflight: set[ProgramId] = set()
        self._arrived_at: dict[ProgramId, int] = {}
        self._program_latencies: list[int] = []
        self._tool_latencies: list[int] = []
        self.completed_steps = 0
        self.completed_programs = 0
        self._loop_task: asyncio.Task | None = None

    def _reclaim_order(
        self, backend_id: str, idle: dict[ProgramId, int], now: int
    ) -> list[ProgramId]:
        # A program with a completion in flight is not idle at the real engine
        idle = {p: t for p, t in idle.items() if p not in self._inflight}
        return self.policy.reclaim_order(backend_id, idle, now) if idle else []

    # Background tick loop

    async def start(self) -> None:
        if self._loop_task is None:
            self._loop_task = asyncio.create_task(self._run())
            logger.info(
                "Gateway started with %d backends (%s)",
                len(self.replicas),
                ", ".join(r.adapter.url for r in self.replicas.values()),
            )

    async def stop(self) -> None:
        if self._loop_task is not None:
            self._loop_task.cancel()
            try:
                await self._loop_task
            except asyncio.CancelledError:
                pass
            self._loop_task = None
        for task in list(self._tool_tasks.values()):
            task.cancel()
        for replica in self.replicas.values():
            await replica.adapter.aclose()

    async def _run(self) -> None:
        interval = self.engine.gateway.tick_interval_seconds
        while True:
            try:
                await self.tick()
            except Exception:
                logger.exception("Gateway tick %d failed", self.now)
            await asyncio.sleep(interval)

    # Polling and scheduling

    async def poll_backends(self) -> list[BackendSnapshot]:
        """One snapshot per backend; an unhealthy backend loses its programs to the queue."""
        snapshots = []
        for replica in self.replicas.values():
            healthy = await replica.adapter.health()
            if not healthy and replica.mirror.healthy:
                logger.warning("Backend %s is unhealthy", replica.backend_id)
                self._failover(replica)
            elif healthy and not replica.mirror.healthy:
                logger.info("Backend %s recovered", replica.backend_id)
                replica.mirror.recover()
            snapshots.append(replica.mirror.snapshot(self.now, url=replica.adapter.url))
        self.snapshots = {s.backend_id: s for s in snapshots}
        return snapshots

    def _failover(self, replica: Replica) -> None:
        for pid in replica.mirror.fail():
            self._pause(pid, replica, EvictionCause.FAILOVER)

    def _view(self, replica: Replica) -> BackendView:
        mirror = replica.mirror
        snapshot = self.snapshots.get(replica.backend_id)
        programs = []
        for pid in mirror.resident:
            program = self.registry.get(pid)
            programs.append(
                ProgramView(
                    program_id=pid,
                    context_tokens=program.context_tokens,
                    phase=program.phase,
                    acting_since=program.status.acting_since,
                    idle_since=mirror.idle_since.get(pid),
                )
            )
        return BackendView(
            backend_id=replica.backend_id,
            capacity_tokens=mirror.capacity_tokens,
            programs=tuple(programs),
            healthy=mirror.healthy,
            stalled_tokens=mirror.stalled,
            taken_at=snapshot.taken_at if snapshot is not None else -1,
        )

    def _process(self, replica: Replica) -> None:
        for event in replica.mirror.drain_events():
            self.events.append(event)
            if event.kind is not SimEventKind.EVICTION_PERFORMED:
                continue
            pid = event.program
            self._kv_seen[pid] = max(self._kv_seen.get(pid, 0), event.tokens)
            program = self.registry.get(pid)
            if program.is_active and program.placement == replica.backend_id:
                self._pause(pid, replica, event.cause, evicted=True)

    def _pause(
        self,
        pid: ProgramId,
        replica: Replica,
        cause: EvictionCause | None,
        evicted: bool = False,
    ) -> None:
        program = self.registry.get(pid)
        paused = pause(
            program,
            self.now,
            backend=None if evicted else replica.mirror,
            queue=self.queue,
            cause=cause,
        )
        self.registry.commit(paused)
        self._inflight.discard(pid)
        if not evicted:
            self._process(replica)

    def _restore(self, pid: ProgramId, replica: Replica) -> None:
        program = self.registry.get(pid)
        try:
            restored = restore(
                program, self._view(replica), self.engine.scheduler, self.now, queue=self.queue
            )
        except (CapacityExceeded, IllegalTransition) as e:
            logger.debug("Restore of %s skipped: %s", pid, e.message)
            return
        self.registry.commit(restored)
        if self.engine.tools.async_prep and self.tools.env_for(pid) is None:
            try:
                self._acquire_env(pid)
            except (DiskExhausted, PortsExhausted) as e:
                logger.debug("Async prep for %s deferred: %s", pid, e.message)
        replica.mirror.admit(
            pid,
            restored.context_tokens,
            self.now,
            history_tokens=self._kv_seen.get(pid, 0),
        )
        self._process(replica)
        self._wake(pid)

    def _apply(self, batch: ScheduleBatch) -> None:
        for decision in batch.pauses:
            program = self.registry.get(decision.program_id)
            if (
                decision.program_id in self._inflight
                or not program.is_active
                or program.placement != decision.backend_id
            ):
                continue
            self._pause(decision.program_id, self.replicas[decision.backend_id], decision.cause)
        for decision in batch.restores:
            replica = self.replicas[decision.backend_id]
            if replica.mirror.healthy and self.registry.get(decision.program_id).is_paused:
                self._restore(decision.program_id, replica)

    async def tick(self) -> None:
        """Poll, schedule, advance the residency mirrors and account one tick."""
        await self.poll_backends()
        now = self.now
        if now % self.policy.interval == 0:
            views = [self._view(r) for r in self.replicas.values()]
            self._apply(self.policy.schedule(now, views, self.queue))
        for replica in self.replicas.values():
            if replica.mirror.healthy:
                self.events.extend(replica.mirror.advance(now))
                self._process(replica)
        if len(self.queue):
            for replica in self.replicas.values():
                unused = replica.mirror.unused() if replica.mirror.healthy else 0
                if unused:
                    self.ledger.record(
                        StpSample(None, replica.backend_id, CostComponent.UNUSED, unused, tick=now)
                    )
        self.footprints.append(tuple(r.mirror.used for r in self.replicas.values()))
        self.now += 1

    # Parking

    def _wake(self, pid: ProgramId) -> None:
        event = self._wakeups.get(pid)
        if event is not None:
            event.set()

    async def _await_placement(self, pid: ProgramId) -> Replica:
        loop = asyncio.get_running_loop()
        deadline = loop.time() + self.engine.gateway.park_timeout_seconds
        while True:
            program = self.registry.get(pid)
            if program.is_stopped:
                raise ProgramStopped(f"program {pid} was released", program_id=pid)
            if program.is_active:
                replica = self.replicas[program.placement]
                if replica.mirror.healthy:
                    return replica
            event = self._wakeups.setdefault(pid, asyncio.Event())
            event.clear()
            remaining = deadline - loop.time()
            try:
                await asyncio.wait_for(event.wait(), timeout=max(remaining, 0))
            except asyncio.TimeoutError:
                raise ParkTimeout(
                    f"program {pid} is still waiting for a backend; retry later",
                    program_id=pid,
                ) from None

    # Client operations

    def _register(self, pid: str, request: ChatRequest) -> None:
        prompt = estimate_tokens(request.messages)
        program = self.registry.register(pid, prompt, now=self.now)
        self._arrived_at[program.id] = self.now
        self.queue.push_program(program, self.now)
        self.policy.on_arrival(program.id, list(self.replicas))
        logger.debug("New program %s (%d prompt tokens)", pid, prompt)

    async def handle_chat(self, request: ChatRequest) -> bytes:
        """
        Forward one completion request once its program holds a backend.

        Raises:
            MissingProgramId: the body carries no program id.
            ProgramStopped: the program was released.
            ParkTimeout: the program did not get a backend in time.
        """
        pid = request.program_id
        if pid is None:
            raise MissingProgramId(
                'requests must carry the program id as extra["program_id"]'
            )
        if pid not in self.registry:
            self._register(pid, request)
        program = self.registry.get(pid)
        if program.is_stopped:
            raise ProgramStopped(f"program {pid} was released", program_id=pid)
        if program.phase is ProgramPhase.ACTING and pid not in self._tool_tasks:
            # Client moved on without reporting a tool result
            self._tool_result(ProgramId(pid), 0)

        payload = forward_payload(request)
        while True:
            replica = await self._await_placement(ProgramId(pid))
            self._inflight.add(ProgramId(pid))
            try:
                raw = await replica.adapter.complete(payload)
            except BackendUnhealthy:
                logger.warning("Backend %s failed mid-request; re-parking %s", replica.backend_id, pid)
                self._inflight.discard(ProgramId(pid))
                if replica.mirror.healthy:
                    self._failover(replica)
                continue
            break

        self._inflight.discard(ProgramId(pid))
        program = self.registry.get(pid)
        tokens = completion_tokens_of(raw)
        if tokens and program.status.kind is StatusKind.REASONING:
            self.registry.apply(pid, TokensDecoded(tokens), self.now)
            # A failover may have moved the program while the completion ran
            current = self.replicas[program.placement]
            if current is not replica:
                logger.info(
                    "Program %s moved from %s to %s during its completion",
                    pid,
                    replica.backend_id,
                    current.backend_id,
                )
            self._grow(current, ProgramId(pid), tokens)
        return raw

    def _grow(self, replica: Replica, pid: ProgramId, tokens: int) -> None:
        mirror = replica.mirror
        if mirror.is_prefilling(pid):
            mirror.extend(pid, tokens, None)
            return
        fits = min(tokens, max(mirror.free, 0))
        if fits:
            mirror.grow(pid, fits)
        # Tokens the mirror cannot hold count as pressure at the next pass
        mirror.stalled += tokens - fits
        self.ledger.record(
            StpSample(pid, replica.backend_id, CostComponent.DECODE, mirror.resident[pid], tick=self.now)
        )

    def _acquire_env(self, pid: ProgramId):
        env = self.tools.acquire_profile(pid, self.profile, self.now, self.profile_name)
        self.registry.add_tool_env(pid, env.env_id)
        return env

    def _tool_result(self, pid: ProgramId, result_tokens: int) -> None:
        program = self.registry.apply(pid, ToolResultReady(result_tokens), self.now)
        if program.is_paused:
            self.queue.update(program)
            return
        replica = self.replicas[program.placement]
        mirror = replica.mirror
        if mirror.is_prefilling(pid):
            mirror.extend(pid, result_tokens, None)
        else:
            mirror.admit(
                pid,
                program.context_tokens,
                self.now,
                history_tokens=self._kv_seen.get(pid, 0),
            )
        self._process(replica)

    async def handle_tool(self, request: ToolRunRequest) -> ToolRunResponse:
        """
        Run a tool call for a program and deliver its result.

        A still-preparing environment delays the result by the residual prep
        time. Releasing the program cancels the call.

        Raises:
            MissingProgramId: no program id given.
            UnknownProgram: the id was never seen.
            ProgramStopped: the program was released.
        """
        if not request.program_id:
            raise MissingProgramId("tool calls must carry program_id")
        pid = ProgramId(request.program_id)
        program = self.registry.get(pid)
        if program.is_stopped:
            raise ProgramStopped(f"program {pid} was released", program_id=pid)

        env = self.tools.env_for(pid) or self._acquire_env(pid)
        program = self.registry.apply(pid, ToolCallIssued(env.env_id), self.now)
        self._inflight.discard(pid)
        run = self.tools.execute_tool(env, pid, self.sampler, self.now, rng=self._rng)
        self.policy.on_tool_call(pid, program.placement or "", self.now)
        self.completed_steps += 1

        ticks = run.done_at - run.issued_at
        task = asyncio.create_task(
            asyncio.sleep(ticks * self.engine.gateway.tick_interval_seconds)
        )
        self._tool_tasks[pid] = task
        try:
            await task
        except asyncio.CancelledError:
            if self.registry.get(pid).is_stopped:
                return ToolRunResponse(program_id=pid, status="cancelled", latency_ticks=ticks)
            raise
        finally:
            self._tool_tasks.pop(pid, None)

        output = f"$ {request.command}\nexit 0\n"
        result_tokens = (
            request.result_tokens
            if request.result_tokens is not None
            else estimate_tokens(output)
        )
        self._tool_result(pid, result_tokens)
        self.policy.on_tool_result(pid, ticks, self.now)
        self._tool_latencies.append(ticks)
        return ToolRunResponse(
            program_id=pid,
            status="ok",
            output=output,
            result_tokens=result_tokens,
            latency_ticks=ticks,
            prep_wait_ticks=run.prep_wait,
        )

    def handle_release(self, request: ReleaseRequest) -> ReleaseResponse:
        """
        Stop a program, drop its cache and reclaim its environments.

        Idempotent: releasing twice acks with nothing reclaimed.

        Raises:
            UnknownProgram: the id was never seen.
        """
        pid = ProgramId(request.program_id)
        program = self.registry.get(pid)
        if program.is_stopped:
            return ReleaseResponse(
                program_id=pid,
                status="already_released",
                reclaimed=ReclaimReport(program_id=pid),
            )

        task = self._tool_tasks.get(pid)
        placement = program.placement
        program = self.registry.apply(pid, ReleaseRequested(), self.now)
        if task is not None:
            task.cancel()
        if placement is not None:
            replica = self.replicas[placement]
            replica.mirror.evict(pid, self.now, EvictionCause.RELEASE)
            self._process(replica)
        else:
            self.queue.remove(pid)
        reclaimed = self.tools.on_program_stopped(program)
        self.policy.on_release(pid)
        self._inflight.discard(pid)
        self._kv_seen.pop(pid, None)
        self._wake(pid)

        self.completed_programs += 1
        self._program_latencies.append(self.now - self._arrived_at.get(pid, self.now))
        logger.info(
            "Released %s: %d disk units, %d ports",
            pid,
            reclaimed.disk_units,
            reclaimed.ports,
        )
        return ReleaseResponse(program_id=pid, status="released", reclaimed=reclaimed)

    # Read side

    def get_program(self, program_id: str) -> ProgramState:
        return ProgramState.from_program(self.registry.get(program_id))

    def metrics(self) -> MetricsReport:
        capacity = max(r.mirror.capacity_tokens for r in self.replicas.values())
        imbalance = (
            max_imbalance(self.footprints, capacity)
            if len(self.replicas) > 1 and self.footprints
            else None
        )
        return MetricsReport(
            throughput_steps_per_min=steps_per_minute(
                self.completed_steps, self.now, self.engine.simulation.ticks_per_minute
            ),
            kv_hit_rate=self.ledger.kv_hit_rate_or_none(),
            max_imbalance=imbalance,
            per_step_latency=summarize_latencies(self._tool_latencies),
            program_latency=summarize_latencies(self._program_latencies),
            cost_breakdown=self.ledger.decompose(),
            total_cost=self.ledger.total,
            disk_peak=self.tools.disk_peak,
            prep_overlap_savings=self.tools.prep_overlap_savings,
            completed_steps=self.completed_steps,
            completed_programs=self.completed_programs,
            elapsed_ticks=self.now,
            reasoning_eviction_recompute=self.ledger.reasoning_eviction_recompute,
        )
