"""Tests for tool environments, resource pools and latency samplers."""

import numpy as np
import pytest
from app.core.config import PoolConfig
from app.core.errors import (
    AlreadyPreparing,
    DiskExhausted,
    EnvNotReady,
    InvalidSpec,
    PortsExhausted,
    ProgramStillActive,
    WrongOwner,
)
from app.models.program import ReleaseRequested, RestoreGranted
from app.models.tools import DEFAULT_PROFILES, PrepState, SamplerSpec
from app.services.program_registry import ProgramRegistry
from app.services.samplers import LatencySampler, lognormal_tokens, stream_rng
from app.services.tool_manager import ToolManager


def manager(disk: int = 4096, ports: int = 1024, hooks: bool = True) -> ToolManager:
    return ToolManager(PoolConfig(disk_capacity=disk, port_count=ports), hooks_enabled=hooks)


def stopped(registry: ProgramRegistry, pid: str):
    registry.apply(pid, RestoreGranted("b0"), 0)
    return registry.apply(pid, ReleaseRequested(), 1)


class TestAcquire:
    def test_claims_disk_and_port(self):
        tools = manager(disk=30)
        env = tools.acquire_env("p1", 10, 0, now=0)

        assert tools.pools.disk_used == 10
        assert env.port == 30000
        assert env.state is PrepState.READY
        assert env.owner == "p1"
        assert tools.env_for("p1") is env

    def test_no_ports(self):
        with pytest.raises(PortsExhausted):
            manager(ports=0).acquire_env("p1", 1, 0, now=0)

    def test_disk_runs_out_on_the_fourth_environment(self):
        tools = manager(disk=30)
        for i in range(3):
            tools.acquire_env(f"p{i}", 10, 0, now=0)
        with pytest.raises(DiskExhausted):
            tools.acquire_env("p3", 10, 0, now=0)
        assert tools.disk_peak == 30

    def test_prepare_async_twice(self):
        tools = manager()
        tools.prepare_async("p1", DEFAULT_PROFILES["mini-swe"], 0)
        with pytest.raises(AlreadyPreparing):
            tools.prepare_async("p1", DEFAULT_PROFILES["mini-swe"], 1)


class TestExecute:
    def test_waits_out_the_residual_preparation(self):
        tools = manager()
        env = tools.acquire_env("p1", 2, 20, now=0)
        assert env.residual(5) == 15

        run = tools.execute_tool(env, "p1", 8, now=0)

        assert run.prep_wait == 20
        assert run.done_at == 28
        assert tools.prep_overlap_savings == 0

    def test_prepared_ahead(self):
        tools = manager()
        env = tools.acquire_env("p1", 2, 20, now=0)

        run = tools.execute_tool(env, "p1", 8, now=25)

        assert run.prep_wait == 0
        assert env.state is PrepState.READY
        assert tools.prep_overlap_savings == 20

    def test_savings_count_only_the_first_call(self):
        tools = manager()
        env = tools.acquire_env("p1", 2, 20, now=0)
        tools.execute_tool(env, "p1", 8, now=30)
        tools.execute_tool(env, "p1", 8, now=60)
        assert tools.prep_overlap_savings == 20

    def test_not_ready_without_waiting(self):
        tools = manager()
        env = tools.acquire_env("p1", 2, 20, now=0)
        with pytest.raises(EnvNotReady):
            tools.execute_tool(env, "p1", 8, now=3, wait_for_prep=False)

    def test_wrong_owner(self):
        tools = manager()
        env = tools.acquire_env("p1", 2, 0, now=0)
        with pytest.raises(WrongOwner):
            tools.execute_tool(env, "p2", 8, now=0)

    def test_sampled_latency(self):
        tools = manager()
        env = tools.acquire_env("p1", 2, 0, now=0)
        sampler = LatencySampler(SamplerSpec.deterministic(12))

        run = tools.execute_tool(env, "p1", sampler, now=4, rng=stream_rng(0, 0))

        assert (run.started_at, run.done_at) == (4, 16)
        with pytest.raises(ValueError):
            tools.execute_tool(env, "p1", sampler, now=4)


class TestRelease:
    def test_reclaims_every_environment(self):
        registry = ProgramRegistry()
        registry.register("p1", 10)
        tools = manager(disk=100)
        tools.acquire_env("p1", 10, 0, now=0)
        tools.acquire_env("p1", 5, 0, now=0)
        program = stopped(registry, "p1")

        report = tools.release_hooks(program)

        assert (report.disk_units, report.ports) == (15, 2)
        assert report.envs == ["env-p1-0", "env-p1-1"]
        assert tools.pools.disk_used == 0
        assert len(tools.pools.ports_free) == 1024
        assert tools.env_for("p1") is None
        assert tools.release_hooks(program).envs == []

    def test_released_env_cannot_run(self):
        registry = ProgramRegistry()
        registry.register("p1", 10)
        tools = manager()
        env = tools.acquire_env("p1", 2, 0, now=0)
        tools.release_hooks(stopped(registry, "p1"))
        with pytest.raises(EnvNotReady):
            tools.execute_tool(env, "p1", 1, now=2)

    def test_active_program(self):
        registry = ProgramRegistry()
        program = registry.register("p1", 10)
        with pytest.raises(ProgramStillActive):
            manager().release_hooks(program)

    def test_disabled_hooks_leak(self):
        registry = ProgramRegistry()
        tools = manager(hooks=False)
        for i in range(10):
            registry.register(f"p{i}", 10)
            tools.acquire_env(f"p{i}", 2, 0, now=0)
            assert tools.on_program_stopped(stopped(registry, f"p{i}")).envs == []

        orphans = tools.leak_audit(registry)

        assert len(orphans) == 10
        assert tools.pools.disk_used == 20
        assert {o.owner for o in orphans} == {f"p{i}" for i in range(10)}

    def test_failed_release_is_an_orphan(self):
        registry = ProgramRegistry()
        registry.register("p1", 10)
        tools = manager()
        env = tools.acquire_env("p1", 2, 0, now=0)
        tools.inject_release_failure(env.env_id)

        report = tools.release_hooks(stopped(registry, "p1"))

        assert report.envs == []
        assert [o.env_id for o in tools.leak_audit(registry)] == [env.env_id]

    def test_conservation_under_churn(self):
        registry = ProgramRegistry()
        tools = manager(disk=50, ports=8)
        for i in range(40):
            pid = f"p{i}"
            registry.register(pid, 10)
            tools.acquire_env(pid, 1 + i % 5, 0, now=i)
            if i % 2 == 0:
                tools.release_hooks(stopped(registry, pid))
            if len(tools.pools.ports_free) < 2:
                for live in [p for p in registry if not p.is_stopped]:
                    tools.release_hooks(stopped(registry, live.id))
            tools.check_conservation()
        assert tools.live_disk() == tools.pools.disk_used


class TestSamplers:
    def test_deterministic(self):
        sampler = LatencySampler(SamplerSpec.deterministic(12))
        assert set(sampler.draw_many(stream_rng(0, 0), 100).tolist()) == {12}

    def test_exponential_is_memoryless(self):
        draws = LatencySampler(SamplerSpec.exponential(20)).draw_many(stream_rng(3, 0), 100_000)
        a, b = 10, 15

        survived = draws[draws > a]
        conditional = np.mean(survived > a + b)
        unconditional = np.mean(draws > b)

        assert conditional == pytest.approx(unconditional, rel=0.03)
        assert draws.min() >= 1

    def test_heavy_tailed_quantiles(self):
        spec = SamplerSpec.heavy_tailed(p50=2, p95=30, p99=120)
        draws = LatencySampler(spec).draw_many(stream_rng(5, 0), 100_000)

        for q, expected in ((0.5, 2), (0.95, 30), (0.99, 120)):
            assert np.quantile(draws, q) == pytest.approx(expected, rel=0.1)
        assert draws.max() <= 480

    def test_streams_are_reproducible(self):
        sampler = LatencySampler(SamplerSpec.exponential(10))
        first = sampler.draw_many(stream_rng(1, 0, 7), 50)
        assert np.array_equal(first, sampler.draw_many(stream_rng(1, 0, 7), 50))
        assert not np.array_equal(first, sampler.draw_many(stream_rng(1, 0, 8), 50))

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "deterministic", "ticks": 0},
            {"kind": "exponential", "mean": -1},
            {"kind": "heavy_tailed", "p50": 10, "p95": 5, "p99": 20},
        ],
    )
    def test_invalid_specs(self, kwargs):
        with pytest.raises(InvalidSpec):
            SamplerSpec(**kwargs)

    def test_lognormal_tokens(self):
        rng = stream_rng(0, 0)
        assert lognormal_tokens(rng, 0, 0.5) == 0
        draws = [lognormal_tokens(rng, 200, 0.5) for _ in range(5000)]
        assert min(draws) >= 1
        assert np.mean(draws) == pytest.approx(200, rel=0.05)
