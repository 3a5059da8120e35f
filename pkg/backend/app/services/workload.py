"""
Synthetic workload traces.

Every stochastic quantity of a program (step count, prompt size, per-step
reasoning and result tokens, tool latencies) is drawn up front from that
program's own random stream, so a trace is fully determined by
(preset, n_programs, seed, overrides) and replaying it needs no sampler.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from app.core.errors import ConfigError, InvalidSpec, UnknownPreset
from app.models.tools import DEFAULT_PROFILES, EnvProfile
from app.models.workload import (
    ArrivalSpec,
    ProgramScript,
    StepScript,
    TraceOverrides,
    WorkloadTrace,
)
from app.services.samplers import (
    ARRIVAL_STREAM,
    PROGRAM_STREAM,
    LatencySampler,
    lognormal_tokens,
    stream_rng,
)
from pydantic import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preset:
    """Shape of the programs a preset generates. All presets are synthetic."""

    profile: str
    steps: tuple[int, int]
    prompt_tokens: tuple[int, int]
    reasoning_mean: float = 400.0
    reasoning_sigma: float = 0.5
    result_mean: float = 200.0
    description: str = ""


PRESETS: dict[str, Preset] = {
    "mini-swe": Preset(
        profile="mini-swe",
        steps=(6, 12),
        prompt_tokens=(800, 2000),
        description="Lightweight coding agent: 2 disk units, short deterministic tools",
    ),
    "heavy-init": Preset(
        profile="heavy-init",
        steps=(4, 8),
        prompt_tokens=(1500, 3000),
        result_mean=300.0,
        description="Heavy-initialization agent: 10 disk units, long environment prep",
    ),
    "stochastic-tools": Preset(
        profile="stochastic-tools",
        steps=(6, 12),
        prompt_tokens=(800, 2000),
        description="Heavy-tailed tool latencies (p50 10, p95 150, p99 600 ticks)",
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPreset(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}", preset=name
        ) from None


def _script(
    index: int,
    seed: int,
    preset: Preset,
    overrides: TraceOverrides,
    env: EnvProfile,
) -> ProgramScript:
    rng = stream_rng(seed, PROGRAM_STREAM, index)
    lo, hi = overrides.steps or preset.steps
    n_steps = int(rng.integers(lo, hi + 1))
    lo, hi = overrides.prompt_tokens or preset.prompt_tokens
    prompt = int(rng.integers(lo, hi + 1))

    latencies = LatencySampler(env.sampler).draw_many(rng, n_steps)
    reasoning_mean = overrides.reasoning_mean or preset.reasoning_mean
    sigma = (
        overrides.reasoning_sigma
        if overrides.reasoning_sigma is not None
        else preset.reasoning_sigma
    )
    result_mean = (
        overrides.result_mean if overrides.result_mean is not None else preset.result_mean
    )
    steps = [
        StepScript(
            reasoning_tokens=lognormal_tokens(rng, reasoning_mean, sigma),
            tool_latency=int(latencies[k]),
            result_tokens=lognormal_tokens(rng, result_mean, sigma),
        )
        for k in range(n_steps)
    ]
    return ProgramScript(
        program_id=f"p{index:04d}",
        prompt_tokens=prompt,
        profile=preset.profile,
        env=env,
        steps=steps,
    )


def generate_trace(
    preset: str,
    n_programs: int,
    seed: int,
    *,
    concurrency: int | None = None,
    arrival_rate_per_minute: float | None = None,
    overrides: TraceOverrides | None = None,
    profiles: Mapping[str, EnvProfile] | None = None,
    ticks_per_minute: int = 60,
) -> WorkloadTrace:
    """
    Generate a reproducible trace.

    Closed-loop arrivals (the default) keep ``concurrency`` programs in
    flight, all of ``n_programs`` if unset. With ``arrival_rate_per_minute``
    programs arrive open loop with exponential gaps.

    Raises:
        UnknownPreset: ``preset`` is not one of PRESETS.
        InvalidSpec: ``n_programs`` is below 1.
    """
    shape = get_preset(preset)
    if n_programs < 1:
        raise InvalidSpec("n_programs must be >= 1", n_programs=n_programs)
    overrides = overrides or TraceOverrides()
    profiles = profiles or DEFAULT_PROFILES
    env = overrides.env or profiles.get(shape.profile) or DEFAULT_PROFILES[shape.profile]

    programs = [_script(i, seed, shape, overrides, env) for i in range(n_programs)]

    if arrival_rate_per_minute is not None:
        rng = stream_rng(seed, ARRIVAL_STREAM)
        gaps = rng.exponential(ticks_per_minute / arrival_rate_per_minute, size=n_programs)
        ticks = np.floor(np.cumsum(gaps) - gaps[0]).astype(np.int64)
        programs = [
            p.model_copy(update={"arrival_tick": int(t)}) for p, t in zip(programs, ticks)
        ]
        arrival = ArrivalSpec(mode="open", rate_per_minute=arrival_rate_per_minute)
    else:
        arrival = ArrivalSpec(mode="closed", concurrency=min(concurrency or n_programs, n_programs))

    logger.debug("Generated %s trace: %d programs, seed %d", preset, n_programs, seed)
    return WorkloadTrace(seed=seed, preset=preset, programs=programs, arrival=arrival)


def save_trace(trace: WorkloadTrace, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(trace.to_json() + "\n", encoding="utf-8")
    return target


def load_trace(path: str | Path) -> WorkloadTrace:
    """
    Read a trace written by ``save_trace``.

    Raises:
        ConfigError: the file is missing or not a valid trace.
    """
    source = Path(path)
    if not source.is_file():
        raise ConfigError(f"trace not found: {source}")
    try:
        return WorkloadTrace.model_validate_json(source.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"invalid trace {source}: {e}") from e
