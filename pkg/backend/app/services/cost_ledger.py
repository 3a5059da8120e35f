"""
Space-time-product cost ledger and the metrics derived from it.

All costs are exact integer token-tick sums.
"""

import logging
from collections import defaultdict
from collections.abc import Sequence

import numpy as np
from app.core.errors import FewerThanTwoBackends, InvalidChunk, NoPrefillActivity
from app.models.cost import CostComponent, LatencySummary, StpSample
from app.models.program import ProgramId

logger = logging.getLogger(__name__)


def _zero() -> dict[CostComponent, int]:
    return {c: 0 for c in CostComponent}


class CostLedger:
    """
    Append-only STP accounting.

    Samples are kept only when ``keep_samples`` is set; the per-component,
    per-program and per-backend accumulators are always maintained.
    """

    def __init__(self, keep_samples: bool = True):
        self.keep_samples = keep_samples
        self.samples: list[StpSample] = []
        self._totals = _zero()
        self._by_program: dict[ProgramId, dict[CostComponent, int]] = defaultdict(_zero)
        self._by_backend: dict[str, dict[CostComponent, int]] = defaultdict(_zero)
        self.hit_tokens = 0
        self.miss_tokens = 0
        self.reasoning_eviction_recompute = 0

    def record(self, sample: StpSample) -> "CostLedger":
        stp = sample.stp
        self._totals[sample.component] += stp
        self._by_backend[sample.backend][sample.component] += stp
        if sample.program is not None:
            self._by_program[sample.program][sample.component] += stp
        if (
            sample.component is CostComponent.RECOMPUTE
            and sample.cause is not None
            and sample.cause.hits_reasoning
        ):
            self.reasoning_eviction_recompute += stp
        if self.keep_samples:
            self.samples.append(sample)
        return self

    def record_resume(self, hit_tokens: int = 0, miss_tokens: int = 0) -> "CostLedger":
        """Count historical tokens found cached (hit) or re-prefilled (miss)."""
        if hit_tokens < 0 or miss_tokens < 0:
            raise ValueError("resume token counts must be nonnegative")
        self.hit_tokens += hit_tokens
        self.miss_tokens += miss_tokens
        return self

    def decompose(self) -> dict[CostComponent, int]:
        return dict(self._totals)

    @property
    def total(self) -> int:
        return sum(self._totals.values())

    def by_program(self, program_id: str) -> dict[CostComponent, int]:
        return dict(self._by_program.get(ProgramId(program_id), _zero()))

    def by_backend(self, backend_id: str) -> dict[CostComponent, int]:
        return dict(self._by_backend.get(backend_id, _zero()))

    def fold(self) -> dict[CostComponent, int]:
        """Recompute the breakdown from the retained samples."""
        totals = _zero()
        for sample in self.samples:
            totals[sample.component] += sample.stp
        return totals

    def kv_hit_rate(self) -> float:
        denominator = self.hit_tokens + self.miss_tokens
        if denominator == 0:
            raise NoPrefillActivity("no resume prefill has been recorded")
        return self.hit_tokens / denominator

    def kv_hit_rate_or_none(self) -> float | None:
        try:
            return self.kv_hit_rate()
        except NoPrefillActivity:
            return None


def recompute_cost_of(context_tokens: int, chunk: int) -> int:
    """
    STP of re-prefilling ``context_tokens`` in chunks of ``chunk`` per tick.

    The cache grows by one chunk per tick and is held for that tick, so the
    cost is the staircase sum of min(k * chunk, c) over ceil(c / chunk) ticks.
    """
    if chunk < 1:
        raise InvalidChunk(f"chunk must be >= 1, got {chunk}", chunk=chunk)
    if context_tokens <= 0:
        return 0
    full, rest = divmod(context_tokens, chunk)
    cost = chunk * full * (full + 1) // 2
    if rest:
        cost += context_tokens
    return cost


def imbalance_of(footprints: Sequence[int], capacity: float) -> float:
    if len(footprints) < 2:
        raise FewerThanTwoBackends("imbalance needs at least two backends")
    return (max(footprints) - min(footprints)) / capacity


def max_imbalance(snapshots: Sequence[Sequence[int]], capacity: float) -> float:
    """
    Largest normalized footprint gap across backends over time.

    Args:
        snapshots: One footprint tuple per instant, one entry per backend.
        capacity: Per-backend KV capacity in tokens.
    """
    if not snapshots:
        return 0.0
    if len(snapshots[0]) < 2:
        raise FewerThanTwoBackends("imbalance needs at least two backends")
    data = np.asarray(snapshots, dtype=float)
    gaps = data.max(axis=1) - data.min(axis=1)
    return float(gaps.max() / capacity)


def interval_imbalance(
    snapshots: Sequence[Sequence[int]], capacity: float, interval: int
) -> list[float]:
    """Per-interval maximum of the normalized footprint gap."""
    if not snapshots:
        return []
    if len(snapshots[0]) < 2:
        raise FewerThanTwoBackends("imbalance needs at least two backends")
    data = np.asarray(snapshots, dtype=float)
    gaps = (data.max(axis=1) - data.min(axis=1)) / capacity
    return [
        float(gaps[start : start + interval].max())
        for start in range(0, len(gaps), interval)
    ]


def summarize_latencies(values: Sequence[float]) -> LatencySummary:
    if len(values) == 0:
        return LatencySummary()
    data = np.asarray(values, dtype=float)
    p50, p95, p99 = np.percentile(data, [50, 95, 99])
    return LatencySummary(
        count=len(data),
        mean=float(data.mean()),
        p50=float(p50),
        p95=float(p95),
        p99=float(p99),
    )


def steps_per_minute(steps: int, elapsed_ticks: int, ticks_per_minute: int) -> float:
    if elapsed_ticks <= 0:
        return 0.0
    return steps * ticks_per_minute / elapsed_ticks
