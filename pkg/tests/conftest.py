"""
Pytest configuration and shared fixtures.
"""

import sys
from pathlib import Path

import pytest

# Add project root to path for imports
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))
sys.path.insert(0, str(PROJECT_ROOT / "backend"))

# Set UTF-8 encoding for Windows
if sys.platform == "win32":
    sys.stdout.reconfigure(encoding="utf-8", errors="replace")

from app.core.config import (  # noqa: E402
    ClusterConfig,
    EngineConfig,
    GatewayBackend,
    GatewayConfig,
    SchedulerConfig,
)
from app.models.scheduling import DecaySpec  # noqa: E402
from app.models.tools import EnvProfile, SamplerSpec  # noqa: E402
from app.models.workload import (  # noqa: E402
    ArrivalSpec,
    ProgramScript,
    StepScript,
    TraceOverrides,
    WorkloadTrace,
)
from app.services.workload import generate_trace  # noqa: E402

# Small programs so full simulations finish in well under a second
SMALL = TraceOverrides(
    steps=(2, 4), prompt_tokens=(100, 300), reasoning_mean=30, result_mean=20
)


@pytest.fixture
def project_root():
    """Return the project root path."""
    return PROJECT_ROOT


def engine_config(
    backends: int = 2,
    capacity: int = 65536,
    decay: DecaySpec | None = None,
    **scheduler,
) -> EngineConfig:
    return EngineConfig(
        cluster=ClusterConfig(backends=backends, capacity_tokens=capacity),
        scheduler=SchedulerConfig(decay=decay or DecaySpec.geometric(), **scheduler),
    )


def small_trace(n: int = 6, seed: int = 0, concurrency: int | None = None, **kwargs):
    return generate_trace(
        "mini-swe", n, seed, concurrency=concurrency, overrides=SMALL, **kwargs
    )


def scripted_trace(
    lifetimes: list[int],
    prompt: int | list[int],
    reasoning: int | list[int] = 20,
    prep: int = 0,
) -> WorkloadTrace:
    """
    Closed-loop trace with one program per entry of ``lifetimes`` (steps each).

    ``prompt`` and ``reasoning`` take one value for every program or one per program.
    """
    n = len(lifetimes)
    prompts = prompt if isinstance(prompt, list) else [prompt] * n
    reasonings = reasoning if isinstance(reasoning, list) else [reasoning] * n
    env = EnvProfile(disk_units=1, prep_latency=prep, sampler=SamplerSpec.deterministic(5))
    programs = [
        ProgramScript(
            program_id=f"p{i}",
            prompt_tokens=prompts[i],
            profile="scripted",
            env=env,
            steps=[
                StepScript(reasoning_tokens=reasonings[i], tool_latency=5, result_tokens=10)
                for _ in range(steps)
            ],
        )
        for i, steps in enumerate(lifetimes)
    ]
    return WorkloadTrace(
        seed=0,
        preset="scripted",
        programs=programs,
        arrival=ArrivalSpec(mode="closed", concurrency=len(programs)),
    )


def gateway_config(
    capacity: int = 65536,
    tick: float = 0.001,
    async_prep: bool = True,
    park_timeout: float = 10.0,
) -> EngineConfig:
    engine = EngineConfig(
        gateway=GatewayConfig(
            backends=[
                GatewayBackend(url="sim://backend-0", capacity_tokens=capacity),
                GatewayBackend(url="sim://backend-1", capacity_tokens=capacity),
            ],
            tick_interval_seconds=tick,
            park_timeout_seconds=park_timeout,
        )
    )
    engine.tools.async_prep = async_prep
    return engine


@pytest.fixture
def engine():
    return engine_config()


@pytest.fixture
def trace():
    return small_trace()
