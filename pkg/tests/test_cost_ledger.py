"""Tests for STP accounting and derived metrics."""

import numpy as np
import pytest
from app.core.errors import FewerThanTwoBackends, InvalidChunk, NoPrefillActivity
from app.models.cost import CostComponent, EvictionCause, StpSample
from app.services.cost_ledger import (
    CostLedger,
    imbalance_of,
    interval_imbalance,
    max_imbalance,
    recompute_cost_of,
    steps_per_minute,
    summarize_latencies,
)


class TestRecord:
    def test_rectangle(self):
        ledger = CostLedger()
        ledger.record(StpSample("p1", "b0", CostComponent.CACHING, 10, duration=5))
        assert ledger.decompose()[CostComponent.CACHING] == 50

    def test_zero_tokens(self):
        ledger = CostLedger()
        ledger.record(StpSample("p1", "b0", CostComponent.CACHING, 0, duration=7))
        assert ledger.total == 0

    def test_empty_ledger(self):
        assert CostLedger().decompose() == {c: 0 for c in CostComponent}

    def test_additivity(self):
        ledger = CostLedger()
        ledger.record(StpSample("p1", "b0", CostComponent.DECODE, 100, duration=3))
        ledger.record(StpSample(None, "b0", CostComponent.UNUSED, 50, duration=2))

        costs = ledger.decompose()
        assert costs[CostComponent.DECODE] == 300
        assert costs[CostComponent.UNUSED] == 100
        assert costs[CostComponent.PREFILL] == 0
        assert ledger.total == 400
        assert ledger.fold() == costs
        assert ledger.by_program("p1")[CostComponent.DECODE] == 300
        assert ledger.by_backend("b0")[CostComponent.UNUSED] == 100

    def test_staircase_recompute(self):
        ledger = CostLedger()
        for tokens in (2, 4, 6, 8):
            ledger.record(StpSample("p1", "b0", CostComponent.RECOMPUTE, tokens))
        assert ledger.decompose()[CostComponent.RECOMPUTE] == 20

    def test_reasoning_evictions_are_tracked(self):
        ledger = CostLedger()
        ledger.record(
            StpSample(
                "p1", "b0", CostComponent.RECOMPUTE, 8, cause=EvictionCause.ENGINE_PREEMPT
            )
        )
        ledger.record(
            StpSample("p2", "b0", CostComponent.RECOMPUTE, 8, cause=EvictionCause.ACTING_PAUSE)
        )
        assert ledger.reasoning_eviction_recompute == 8

    def test_unused_has_no_program(self):
        with pytest.raises(ValueError):
            StpSample("p1", "b0", CostComponent.UNUSED, 5)

    def test_duration_must_be_positive(self):
        with pytest.raises(ValueError):
            StpSample("p1", "b0", CostComponent.DECODE, 5, duration=0)


class TestRecomputeCost:
    def test_small_case(self):
        assert recompute_cost_of(8, 2) == 20

    def test_partial_last_chunk(self):
        # 3 + 6 + 7
        assert recompute_cost_of(7, 3) == 16

    def test_empty_context(self):
        assert recompute_cost_of(0, 4) == 0

    def test_invalid_chunk(self):
        with pytest.raises(InvalidChunk):
            recompute_cost_of(8, 0)

    def test_matches_brute_force(self):
        for c in range(0, 60):
            for chunk in (1, 3, 7, 16):
                steps = -(-c // chunk)
                brute = sum(min(k * chunk, c) for k in range(1, steps + 1))
                assert recompute_cost_of(c, chunk) == brute

    def test_quadratic_growth(self):
        cs = np.array([2**k for k in range(6, 15)])
        costs = np.array([recompute_cost_of(int(c), 4) for c in cs])
        slope = np.polyfit(np.log(cs), np.log(costs), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.05)


class TestHitRate:
    def test_all_hits(self):
        ledger = CostLedger().record_resume(hit_tokens=100)
        assert ledger.kv_hit_rate() == 1.0

    def test_all_misses(self):
        ledger = CostLedger().record_resume(miss_tokens=100)
        assert ledger.kv_hit_rate() == 0.0

    def test_one_miss_in_three(self):
        ledger = CostLedger()
        ledger.record_resume(hit_tokens=100)
        ledger.record_resume(hit_tokens=100)
        ledger.record_resume(miss_tokens=100)
        assert ledger.kv_hit_rate() == pytest.approx(200 / 300)

    def test_no_activity(self):
        ledger = CostLedger()
        with pytest.raises(NoPrefillActivity):
            ledger.kv_hit_rate()
        assert ledger.kv_hit_rate_or_none() is None


class TestImbalance:
    def test_identical_footprints(self):
        assert max_imbalance([(5, 5), (300, 300)], 1000) == 0.0

    def test_peak_gap(self):
        assert imbalance_of((900, 390), 1000) == pytest.approx(0.51)
        assert max_imbalance([(100, 100), (900, 390), (500, 400)], 1000) == pytest.approx(0.51)

    def test_extreme(self):
        assert max_imbalance([(0, 1000)], 1000) == 1.0

    def test_one_backend(self):
        with pytest.raises(FewerThanTwoBackends):
            max_imbalance([(10,)], 1000)
        with pytest.raises(FewerThanTwoBackends):
            imbalance_of((10,), 1000)

    def test_per_interval(self):
        snapshots = [(0, 0), (0, 100), (50, 50), (0, 300)]
        assert interval_imbalance(snapshots, 1000, 2) == pytest.approx([0.1, 0.3])


def test_latency_summary():
    summary = summarize_latencies(list(range(1, 101)))
    assert summary.count == 100
    assert summary.mean == pytest.approx(50.5)
    assert summary.p50 == pytest.approx(50.5)
    assert summarize_latencies([]).count == 0


def test_steps_per_minute():
    assert steps_per_minute(30, 120, 60) == 15.0
    assert steps_per_minute(30, 0, 60) == 0.0
