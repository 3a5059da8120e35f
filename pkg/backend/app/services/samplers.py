"""
Tool latency samplers and seeded random streams.

Every stochastic draw in the engine comes from a numpy Generator keyed by
(seed, stream, index), so one program's draws never depend on another's.
"""

import math

import numpy as np
from app.models.tools import SamplerSpec

PROGRAM_STREAM = 0
ARRIVAL_STREAM = 1
GATEWAY_STREAM = 2


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


class LatencySampler:
    """Draws integer tool latencies (>= 1 tick) from a SamplerSpec."""

    def __init__(self, spec: SamplerSpec):
        self.spec = spec
        if spec.kind == "heavy_tailed":
            cap = spec.cap if spec.cap is not None else 4 * spec.p99  # type: ignore[operator]
            self._quantiles = np.array([0.0, 0.5, 0.95, 0.99, 1.0])
            self._log_values = np.log([1.0, spec.p50, spec.p95, spec.p99, cap])

    def draw(self, rng: np.random.Generator) -> int:
        return int(self.draw_many(rng, 1)[0])

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        spec = self.spec
        if spec.kind == "deterministic":
            return np.full(n, spec.ticks, dtype=np.int64)
        if spec.kind == "exponential":
            raw = np.ceil(rng.exponential(spec.mean, size=n))
        else:
            # Piecewise log-linear inverse CDF through the configured quantiles
            u = rng.random(size=n)
            raw = np.rint(np.exp(np.interp(u, self._quantiles, self._log_values)))
        return np.maximum(raw, 1).astype(np.int64)


def lognormal_tokens(rng: np.random.Generator, mean: float, sigma: float) -> int:
    """Integer draw from a log-normal with the given arithmetic mean."""
    if mean <= 0:
        return 0
    mu = math.log(mean) - sigma**2 / 2
    return max(1, int(np.rint(rng.lognormal(mu, sigma))))
