"""Tests for the program-tagged gateway engine."""

import asyncio
import json

import httpx
import pytest
from app.core.errors import (
    ConfigError,
    MissingProgramId,
    ParkTimeout,
    ProgramStopped,
    UnknownProgram,
)
from app.models.api import ChatRequest, ReleaseRequest, ToolRunRequest
from app.models.cost import EvictionCause
from app.services.gateway import (
    HttpBackendAdapter,
    ProgramGateway,
    SimBackendAdapter,
    forward_payload,
)

from tests.conftest import gateway_config


def chat(pid: str | None, text: str = "fix the failing test", **fields) -> ChatRequest:
    extra = {"program_id": pid} if pid is not None else {}
    return ChatRequest(
        model="agent", messages=[{"role": "user", "content": text}], extra=extra, **fields
    )


async def serve(gateway: ProgramGateway, coro, limit: int = 500):
    """Tick the gateway by hand until ``coro`` finishes."""
    task = asyncio.ensure_future(coro)
    for _ in range(limit):
        await asyncio.sleep(0)
        if task.done():
            break
        await gateway.tick()
    return await task


@pytest.fixture
def gateway():
    return ProgramGateway(gateway_config())


def test_forward_payload_drops_only_the_program_id():
    request = ChatRequest.model_validate(
        {
            "model": "m",
            "messages": [],
            "temperature": 0.2,
            "program_id": "p1",
            "extra": {"program_id": "p1", "trace": "abc"},
        }
    )

    assert request.program_id == "p1"
    assert forward_payload(request) == {
        "model": "m",
        "messages": [],
        "temperature": 0.2,
        "extra": {"trace": "abc"},
    }


def test_needs_a_backend():
    with pytest.raises(ConfigError):
        ProgramGateway(gateway_config(), adapters=[])


async def test_missing_program_id(gateway):
    with pytest.raises(MissingProgramId):
        await gateway.handle_chat(chat(None))


async def test_first_request_is_served(gateway):
    raw = await serve(gateway, gateway.handle_chat(chat("p1")))

    body = json.loads(raw)
    state = gateway.get_program("p1")
    assert body["usage"]["completion_tokens"] == 32
    assert state.status == "reasoning"
    assert state.placement == "backend-0"
    assert state.context_tokens == body["usage"]["prompt_tokens"] + 32
    assert state.tool_envs == ["env-p1-0"]


async def test_park_timeout():
    gateway = ProgramGateway(gateway_config(park_timeout=0.05))
    with pytest.raises(ParkTimeout):
        await gateway.handle_chat(chat("p1"))


async def test_http_backend_gets_the_body_untouched():
    seen = []
    canned = b'{"id":"x","usage":{"completion_tokens":5}}'

    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.path == "/health":
            return httpx.Response(200)
        seen.append(json.loads(request.content))
        return httpx.Response(200, content=canned)

    adapter = HttpBackendAdapter(
        "backend-0", "http://engine:8000", transport=httpx.MockTransport(handler)
    )
    gateway = ProgramGateway(gateway_config(), adapters=[adapter])

    raw = await serve(gateway, gateway.handle_chat(chat("p1", max_tokens=5)))

    assert raw == canned
    assert seen == [
        {
            "model": "agent",
            "messages": [{"role": "user", "content": "fix the failing test"}],
            "max_tokens": 5,
        }
    ]
    await gateway.stop()


async def test_released_program_is_refused(gateway):
    await serve(gateway, gateway.handle_chat(chat("p1")))
    gateway.handle_release(ReleaseRequest(program_id="p1"))

    with pytest.raises(ProgramStopped):
        await gateway.handle_chat(chat("p1"))
    with pytest.raises(ProgramStopped):
        await gateway.handle_tool(ToolRunRequest(command="ls", program_id="p1"))


async def test_release_is_idempotent(gateway):
    await serve(gateway, gateway.handle_chat(chat("p1")))

    first = gateway.handle_release(ReleaseRequest(program_id="p1"))
    second = gateway.handle_release(ReleaseRequest(program_id="p1"))

    assert first.status == "released"
    assert first.reclaimed.disk_units == 2
    assert second.status == "already_released"
    assert second.reclaimed.envs == []
    assert gateway.tools.pools.disk_used == 0
    assert "p1" not in gateway.replicas["backend-0"].mirror.resident


async def test_unknown_program(gateway):
    with pytest.raises(UnknownProgram):
        await gateway.handle_tool(ToolRunRequest(command="ls", program_id="ghost"))
    with pytest.raises(UnknownProgram):
        gateway.handle_release(ReleaseRequest(program_id="ghost"))


async def test_tool_waits_for_preparation():
    gateway = ProgramGateway(gateway_config(async_prep=False))
    await serve(gateway, gateway.handle_chat(chat("p1")))

    result = await gateway.handle_tool(ToolRunRequest(command="ls", program_id="p1"))

    assert result.status == "ok"
    assert result.prep_wait_ticks == 20
    assert result.latency_ticks == 28
    assert result.output == "$ ls\nexit 0\n"
    state = gateway.get_program("p1")
    assert state.phase == "reasoning"
    assert state.step_count == 1


async def test_tool_result_tokens_extend_the_context(gateway):
    await serve(gateway, gateway.handle_chat(chat("p1")))
    before = gateway.get_program("p1").context_tokens

    await gateway.handle_tool(ToolRunRequest(command="pytest", program_id="p1", result_tokens=50))

    assert gateway.get_program("p1").context_tokens == before + 50


async def test_release_cancels_a_running_tool():
    gateway = ProgramGateway(gateway_config(tick=0.01))
    await serve(gateway, gateway.handle_chat(chat("p1")))

    task = asyncio.ensure_future(
        gateway.handle_tool(ToolRunRequest(command="make", program_id="p1"))
    )
    await asyncio.sleep(0.02)
    gateway.handle_release(ReleaseRequest(program_id="p1"))
    result = await task

    assert result.status == "cancelled"
    assert gateway.tools.leak_audit(gateway.registry) == []
    assert gateway.tools.pools.disk_used == 0


async def test_unhealthy_backend_moves_the_program(gateway):
    await serve(gateway, gateway.handle_chat(chat("p1")))
    gateway.replicas["backend-0"].adapter.healthy = False

    await gateway.poll_backends()

    assert gateway.get_program("p1").status == "paused"
    assert "p1" in gateway.queue
    assert any(e.cause is EvictionCause.FAILOVER for e in gateway.events)

    await serve(gateway, gateway.handle_chat(chat("p1", "and now?")))

    assert gateway.get_program("p1").placement == "backend-1"
    assert len(gateway.replicas["backend-1"].adapter.received) == 1


async def test_snapshots_follow_the_mirrors(gateway):
    await serve(gateway, gateway.handle_chat(chat("p1")))
    await serve(gateway, gateway.handle_chat(chat("p2")))
    for _ in range(3):
        await gateway.tick()

    snapshots = await gateway.poll_backends()

    for snapshot in snapshots:
        mirror = gateway.replicas[snapshot.backend_id].mirror
        assert snapshot.active_program_tokens == mirror.used
        assert snapshot.taken_at == gateway.now
    assert sum(s.active_program_tokens for s in snapshots) > 0


async def test_concurrent_clients_under_memory_pressure():
    gateway = ProgramGateway(gateway_config(capacity=400))

    async def client(i: int) -> None:
        pid = f"agent-{i}"
        for step in range(3):
            await gateway.handle_chat(chat(pid, f"task {i} step {step}"))
            await gateway.handle_tool(ToolRunRequest(command=f"run {step}", program_id=pid))
        gateway.handle_release(ReleaseRequest(program_id=pid))

    await gateway.start()
    try:
        await asyncio.wait_for(asyncio.gather(*(client(i) for i in range(20))), timeout=60)
    finally:
        await gateway.stop()

    report = gateway.metrics()
    assert report.completed_programs == 20
    assert report.completed_steps == 60
    assert gateway.tools.leak_audit(gateway.registry) == []
    assert gateway.tools.pools.disk_used == 0
    assert len(gateway.queue) == 0


class StalledAdapter(SimBackendAdapter):
    """Holds every completion until ``gate`` opens; health follows ``reachable``."""

    def __init__(self, backend_id: str, url: str):
        super().__init__(backend_id, url)
        self.reachable = True
        self.started = asyncio.Event()
        self.gate = asyncio.Event()

    async def complete(self, payload):
        self.started.set()
        await self.gate.wait()
        return await super().complete(payload)

    async def health(self) -> bool:
        return self.reachable


async def test_completion_lands_on_the_backend_the_program_moved_to(gateway):
    old = gateway.replicas["backend-0"].adapter
    stalled = StalledAdapter(old.backend_id, old.url)
    gateway.replicas["backend-0"].adapter = stalled

    task = asyncio.ensure_future(gateway.handle_chat(chat("p1")))
    for _ in range(50):
        await asyncio.sleep(0)
        if stalled.started.is_set():
            break
        await gateway.tick()
    assert stalled.started.is_set()
    assert gateway.get_program("p1").placement == "backend-0"

    stalled.reachable = False
    await gateway.poll_backends()
    for _ in range(50):
        if gateway.get_program("p1").placement == "backend-1":
            break
        await gateway.tick()
    assert gateway.get_program("p1").placement == "backend-1"

    before = gateway.get_program("p1").context_tokens
    stalled.gate.set()
    raw = await asyncio.wait_for(task, timeout=5)

    body = json.loads(raw)
    program = gateway.get_program("p1")
    assert program.placement == "backend-1"
    assert program.context_tokens == before + body["usage"]["completion_tokens"]
    mirror = gateway.replicas["backend-1"].mirror
    assert mirror.committed == program.context_tokens
