"""Time-decay evaluation for acting programs."""

from app.models.scheduling import DecaySpec


def decay_eval(spec: DecaySpec, t: float) -> float:
    """
    Weight in (0, 1] of an Acting program's tokens after ``t`` units of tool time.

    Args:
        spec: Decay function.
        t: Elapsed acting time, t >= 0.
    """
    if t < 0:
        raise ValueError(f"elapsed acting time must be nonnegative, got {t}")
    return spec.evaluate(t)


def elapsed_units(spec: DecaySpec, ticks: int, interval: int = 1) -> float:
    """Acting ticks expressed in monitor intervals; geometric decay counts whole ones."""
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    if spec.kind == "geometric":
        return float(ticks // interval)
    return ticks / interval


def acting_weight(
    context_tokens: int,
    acting_since: int | None,
    spec: DecaySpec,
    now: int,
    interval: int = 1,
) -> float:
    """Effective tokens of one Acting program."""
    if acting_since is None:
        return float(context_tokens)
    ticks = max(0, now - acting_since)
    return context_tokens * decay_eval(spec, elapsed_units(spec, ticks, interval))
