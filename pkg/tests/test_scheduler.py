"""Tests for decay, the global queue, the program-aware scheduler and the baselines."""

import itertools

import numpy as np
import pytest
from app.core.config import BaselineConfig, SchedulerConfig
from app.core.errors import CapacityExceeded, IllegalTransition, InvalidSpec, Shortfall
from app.models.cost import EvictionCause
from app.models.program import ProgramPhase, RestoreGranted, StatusKind, ToolCallIssued
from app.models.scheduling import (
    BackendView,
    DecaySpec,
    DecisionKind,
    ProgramView,
    QueueEntry,
)
from app.scheduling import (
    GlobalWaitQueue,
    PinnedRoutingPolicy,
    ProgramAwarePolicy,
    RequestAwarePolicy,
    TtlPinPolicy,
    create_policy,
    decay_eval,
    effective_load,
    growth_fits,
    pause,
    restore,
    schedule_tick,
    select_evictions,
    thrashing_pressure,
)
from app.services.program_registry import apply_event, create_program

CONSTANT = SchedulerConfig(decay=DecaySpec.constant())


def acting(pid: str, c: int, since: int = 0) -> ProgramView:
    return ProgramView(pid, c, ProgramPhase.ACTING, acting_since=since)


def reasoning(pid: str, c: int) -> ProgramView:
    return ProgramView(pid, c, ProgramPhase.REASONING)


def entry(pid: str, c: int, phase=ProgramPhase.REASONING, since: int = 0) -> QueueEntry:
    return QueueEntry(pid, c, phase, since)


class TestDecay:
    def test_geometric(self):
        spec = DecaySpec.geometric(2)
        assert decay_eval(spec, 0) == 1.0
        assert decay_eval(spec, 3) == 0.125

    def test_every_variant_starts_at_one(self):
        for spec in (DecaySpec.constant(), DecaySpec.geometric(3), DecaySpec.exponential(0.2)):
            assert decay_eval(spec, 0) == 1.0

    def test_decaying_variants_vanish(self):
        assert decay_eval(DecaySpec.geometric(2), 2000) == 0.0
        assert decay_eval(DecaySpec.exponential(1.0), 2000) == 0.0
        assert decay_eval(DecaySpec.constant(), 2000) == 1.0

    def test_semigroup(self):
        rng = np.random.default_rng(0)
        specs = [DecaySpec.geometric(2), DecaySpec.exponential(0.3)]
        for s, t in rng.uniform(0, 50, size=(10_000, 2)):
            for spec in specs:
                assert decay_eval(spec, s) * decay_eval(spec, t) == pytest.approx(
                    decay_eval(spec, s + t), rel=1e-12
                )

    def test_negative_time(self):
        with pytest.raises(ValueError):
            decay_eval(DecaySpec.geometric(), -1)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidSpec):
            DecaySpec.geometric(1.0)
        with pytest.raises(InvalidSpec):
            DecaySpec.exponential(0.0)


class TestLoad:
    def test_weighted_sum(self):
        programs = [reasoning("a", 100), acting("b", 200, since=9)]
        assert effective_load(programs, DecaySpec.geometric(2), now=10) == 200.0

    def test_no_acting_programs(self):
        programs = [reasoning("a", 100), reasoning("b", 250)]
        assert effective_load(programs, DecaySpec.geometric(2), now=50) == 350.0

    def test_old_tool_call(self):
        assert effective_load([acting("a", 1024, since=0)], DecaySpec.geometric(2), 10) == 1.0

    def test_reasoning_weighs_the_rest_of_its_turn(self):
        view = ProgramView("a", 100, ProgramPhase.REASONING, reserved_tokens=30)
        assert effective_load([view], DecaySpec.geometric(2), now=0) == 130.0

    def test_geometric_decay_counts_whole_intervals(self):
        spec = DecaySpec.geometric(2)
        program = [acting("a", 1024, since=0)]
        assert effective_load(program, spec, now=4, interval=5) == 1024.0
        assert effective_load(program, spec, now=5, interval=5) == 512.0
        assert effective_load(program, spec, now=10, interval=5) == 256.0

    def test_exponential_decay_counts_fractional_intervals(self):
        spec = DecaySpec.exponential(0.5)
        weight = effective_load([acting("a", 1000, since=0)], spec, now=3, interval=2)
        assert weight == pytest.approx(1000 * decay_eval(spec, 1.5))

    def test_interval_must_be_positive(self):
        with pytest.raises(ValueError):
            effective_load([acting("a", 10)], DecaySpec.geometric(2), now=3, interval=0)

    @pytest.mark.parametrize(
        "capacity, load, lambda_max, expected",
        [(1000, 900, 1.0, 0), (1000, 1300, 1.0, 300), (1000, 950, 0.9, 50)],
    )
    def test_pressure(self, capacity, load, lambda_max, expected):
        assert thrashing_pressure(capacity, load, lambda_max) == pytest.approx(expected)


class TestSelectEvictions:
    def test_smallest_first(self):
        selection = select_evictions([acting("a", 3), acting("b", 5), acting("c", 8)], 7)
        assert sorted(selection.ids) == ["a", "b"]

    def test_nothing_needed(self):
        assert select_evictions([acting("a", 3)], 0).ids == []

    def test_acting_tier_first(self):
        candidates = [acting("big", 9), reasoning("r1", 2), reasoning("r2", 2)]
        assert select_evictions(candidates, 4).ids == ["big"]

    def test_shortfall(self):
        with pytest.raises(Shortfall):
            select_evictions([acting("a", 3)], 10)
        selection = select_evictions([acting("a", 3)], 10, strict=False)
        assert selection.shortfall == 7

    def test_decayed_weights_cover_less(self):
        # Each old acting program now weighs 1 token
        candidates = [acting("a", 1024, since=0), acting("b", 1024, since=0)]
        selection = select_evictions(
            candidates, 2, decay=DecaySpec.geometric(2), now=10
        )
        assert len(selection.ids) == 2

    def test_overshooting_prefix_can_cost_more(self):
        # The prefix {2, 9} covers 9 with Σc² = 85; {9} alone costs 81
        selection = select_evictions([acting("a", 2), acting("b", 9)], 9)
        assert selection.ids == ["a", "b"]
        assert sum(p.context_tokens**2 for p in selection.programs) == 85

    def test_prefix_is_cheapest_of_its_size(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            sizes = [int(c) for c in rng.integers(1, 50, size=n)]
            delta = int(rng.integers(1, sum(sizes) + 1))
            candidates = [acting(f"p{i}", c) for i, c in enumerate(sizes)]

            chosen = select_evictions(candidates, delta).programs
            cost = sum(p.context_tokens**2 for p in chosen)

            best = min(
                sum(c * c for c in subset)
                for subset in itertools.combinations(sizes, len(chosen))
                if sum(subset) >= delta
            )
            assert cost == best

    def test_exact_covers_minimize_recompute(self):
        rng = np.random.default_rng(42)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            sizes = [int(c) for c in rng.integers(1, 50, size=n)]
            k = int(rng.integers(1, n + 1))
            delta = sum(sorted(sizes)[:k])
            candidates = [acting(f"p{i}", c) for i, c in enumerate(sizes)]

            chosen = select_evictions(candidates, delta).programs
            cost = sum(p.context_tokens**2 for p in chosen)

            best = min(
                sum(c * c for c in subset)
                for r in range(1, n + 1)
                for subset in itertools.combinations(sizes, r)
                if sum(subset) >= delta
            )
            assert cost == best


class TestQueue:
    def test_reasoning_restores_before_acting(self):
        queue = GlobalWaitQueue()
        queue.push(entry("act", 50, ProgramPhase.ACTING))
        queue.push(entry("rsn", 100))
        assert [e.program_id for e in queue.ordered()] == ["rsn", "act"]

    def test_ties_break_on_paused_since_then_id(self):
        queue = GlobalWaitQueue()
        queue.push(entry("b", 100, since=5))
        queue.push(entry("c", 100, since=1))
        queue.push(entry("a", 100, since=5))
        assert [e.program_id for e in queue.ordered()] == ["c", "a", "b"]

    def test_update_keeps_paused_since(self):
        queue = GlobalWaitQueue()
        program = create_program("p1", 100, now=3)
        queue.push_program(program)
        acting_program = apply_event(program, ToolCallIssued(), 7)
        queue.update(acting_program)

        queued = queue.get("p1")
        assert queued.paused_since == 3
        assert queued.phase is ProgramPhase.ACTING

    def test_remove_and_min_context(self):
        queue = GlobalWaitQueue()
        queue.push(entry("a", 30))
        queue.push(entry("b", 10))
        assert queue.min_context() == 10
        queue.remove("b")
        assert queue.min_context() == 30
        assert "b" not in queue
        assert len(queue) == 1


class RecordingBackend:
    def __init__(self):
        self.evicted = []

    def evict(self, program_id, now, cause):
        self.evicted.append((program_id, cause))
        return 0


class TestPauseRestore:
    def test_pause_acting_program(self):
        program = apply_event(create_program("p1", 300), RestoreGranted("b1"), 0)
        program = apply_event(program, ToolCallIssued(), 2)
        backend, queue = RecordingBackend(), GlobalWaitQueue()

        paused = pause(program, 5, backend=backend, queue=queue)

        assert paused.status.kind is StatusKind.PAUSED
        assert paused.placement is None
        assert backend.evicted == [("p1", EvictionCause.ACTING_PAUSE)]
        assert "p1" in queue

    def test_pause_paused(self):
        with pytest.raises(IllegalTransition):
            pause(create_program("p1", 10), 0)

    def test_restore_fits(self):
        view = BackendView("b0", 1000, (reasoning("x", 400),))
        queue = GlobalWaitQueue()
        program = create_program("p1", 400)
        queue.push_program(program)

        restored = restore(program, view, CONSTANT, 0, queue=queue)

        assert restored.placement == "b0"
        assert restored.status.kind is StatusKind.REASONING
        assert "p1" not in queue

    def test_restore_over_watermark(self):
        view = BackendView("b0", 1000, (reasoning("x", 400),))
        with pytest.raises(CapacityExceeded):
            restore(create_program("p1", 700), view, CONSTANT, 0)

    def test_restore_counts_reserved_decode(self):
        view = BackendView("b0", 1000, (reasoning("x", 400),))
        restore(create_program("p1", 400), view, CONSTANT, 0)
        with pytest.raises(CapacityExceeded):
            restore(create_program("p1", 400), view, CONSTANT, 0, reserved_tokens=201)


class TestGrowthFits:
    def test_growing_program_counts_at_full_weight(self):
        old = ProgramView("a", 400, ProgramPhase.ACTING, acting_since=0)
        view = BackendView("b0", 1000, (old, reasoning("r", 300)))
        config = SchedulerConfig(decay=DecaySpec.geometric(2))

        assert growth_fits(view, "a", 300, config, now=100)
        assert not growth_fits(view, "a", 301, config, now=100)

    def test_waiting_results_keep_their_claim(self):
        held = ProgramView("b", 100, ProgramPhase.ACTING, acting_since=0, held_tokens=250)
        view = BackendView("b0", 1000, (acting("a", 400), held))

        assert growth_fits(view, "a", 250, CONSTANT, now=3)
        assert not growth_fits(view, "a", 251, CONSTANT, now=3)

    def test_decayed_neighbours_make_room(self):
        view = BackendView("b0", 1000, (acting("a", 400), acting("b", 600, since=0)))
        config = SchedulerConfig(decay=DecaySpec.geometric(2), delta_t=1)

        assert not growth_fits(view, "a", 100, config, now=0)
        assert growth_fits(view, "a", 100, config, now=10)


class TestScheduleTick:
    def test_balanced_cluster_is_noop(self):
        views = [BackendView("b0", 1000, (reasoning("a", 400),)), BackendView("b1", 1000)]
        assert schedule_tick(views, [], CONSTANT, 0).is_noop

    def test_pauses_shortest_acting_first(self):
        programs = (acting("a", 100), acting("b", 250), acting("c", 400), reasoning("r", 550))
        batch = schedule_tick([BackendView("b0", 1000, programs)], [], CONSTANT, 0)

        assert sorted(d.program_id for d in batch.pauses) == ["a", "b"]
        assert all(d.cause is EvictionCause.ACTING_PAUSE for d in batch.pauses)

    def test_global_queue_fills_the_empty_backend(self):
        views = [
            BackendView("A", 1000, (reasoning("full", 1000),)),
            BackendView("B", 1000),
        ]
        queue = [entry("q1", 200), entry("q2", 200), entry("q3", 200)]

        batch = schedule_tick(views, queue, CONSTANT, 0)

        assert [(d.program_id, d.backend_id) for d in batch.restores] == [
            ("q1", "B"),
            ("q2", "B"),
            ("q3", "B"),
        ]

    def test_large_head_does_not_block(self):
        views = [BackendView("A", 1000, (reasoning("x", 700),))]
        queue = [entry("small", 100, since=5), entry("huge", 900, since=0)]
        batch = schedule_tick(views, sorted(queue, key=lambda e: e.paused_since), CONSTANT, 0)
        assert [d.program_id for d in batch.restores] == ["small"]

    def test_stale_views_are_ignored(self):
        views = [BackendView("A", 1000, taken_at=0)]
        batch = schedule_tick(views, [entry("q", 10)], CONSTANT, now=CONSTANT.delta_t + 1)
        assert batch.is_noop

    def test_unhealthy_backend_gets_nothing(self):
        views = [BackendView("A", 1000, healthy=False), BackendView("B", 1000)]
        batch = schedule_tick(views, [entry("q", 10)], CONSTANT, 0)
        assert [d.backend_id for d in batch.restores] == ["B"]

    def test_reasoning_programs_are_never_paused(self):
        views = [BackendView("A", 1000, (reasoning("a", 1000),), stalled_tokens=1)]
        assert schedule_tick(views, [], CONSTANT, 0).is_noop

    def test_stalled_tokens_count_as_load(self):
        programs = (reasoning("r", 900), acting("a", 50), acting("b", 60))
        views = [BackendView("A", 1000, programs, stalled_tokens=120)]

        batch = schedule_tick(views, [], CONSTANT, 0)

        assert [(d.program_id, d.cause) for d in batch.pauses] == [
            ("a", EvictionCause.ACTING_PAUSE),
            ("b", EvictionCause.ACTING_PAUSE),
        ]

    def test_reserved_decode_blocks_a_restore(self):
        views = [BackendView("A", 1000, (reasoning("x", 400),))]
        assert schedule_tick(views, [entry("q", 400)], CONSTANT, 0).restores
        queued = QueueEntry("q", 400, ProgramPhase.REASONING, 0, reserved_tokens=300)
        assert schedule_tick(views, [queued], CONSTANT, 0).is_noop

    def test_held_results_keep_their_claim(self):
        held = ProgramView("a", 300, ProgramPhase.ACTING, acting_since=0, held_tokens=500)
        views = [BackendView("A", 1000, (held,))]

        batch = schedule_tick(views, [entry("big", 300), entry("small", 150)], CONSTANT, 0)

        assert [d.program_id for d in batch.restores] == ["small"]
        assert not batch.pauses

    def test_held_results_break_an_all_acting_deadlock(self):
        held = ProgramView("a", 500, ProgramPhase.ACTING, acting_since=0, held_tokens=300)
        programs = (held, acting("b", 200), acting("c", 250))

        batch = schedule_tick([BackendView("A", 1000, programs)], [], CONSTANT, 0)

        assert sorted(d.program_id for d in batch.pauses) == ["b", "c"]
        assert all(d.cause is EvictionCause.ACTING_PAUSE for d in batch.pauses)

    def test_no_deadlock_break_while_a_turn_runs(self):
        held = ProgramView("a", 500, ProgramPhase.ACTING, acting_since=0, held_tokens=300)
        programs = (held, acting("b", 200), reasoning("r", 250))
        assert schedule_tick([BackendView("A", 1000, programs)], [], CONSTANT, 0).is_noop


class TestPolicies:
    def test_factory(self):
        assert isinstance(create_policy("program-aware"), ProgramAwarePolicy)
        with pytest.raises(ValueError):
            create_policy("round-robin")

    def test_program_aware_interval_and_reclaim(self):
        policy = ProgramAwarePolicy(SchedulerConfig(delta_t=7))
        assert policy.interval == 7
        assert policy.reclaim_order("b0", {"late": 9, "early": 2}, 10) == ["early", "late"]
        assert ProgramAwarePolicy(CONSTANT).reclaim_order("b0", {"a": 1}, 10) == []
        assert policy.engine_preempts is False

    def test_only_program_aware_holds_tool_results(self):
        full = BackendView("A", 1000, (acting("p", 900), reasoning("r", 100)))
        assert not ProgramAwarePolicy(CONSTANT).admits_growth(0, full, "p", 1)
        assert RequestAwarePolicy().admits_growth(0, full, "p", 1)
        assert TtlPinPolicy().admits_growth(0, full, "p", 1)

    def test_oversized_program_is_starved(self):
        policy = ProgramAwarePolicy(CONSTANT)
        queue = GlobalWaitQueue()
        queue.push(entry("huge", 5000))
        policy.schedule(0, [BackendView("A", 1000)], queue)
        policy.schedule(5, [BackendView("A", 1000, taken_at=5)], queue)
        assert queue.starvation["huge"] == 2

    def test_request_aware_admits_fcfs_into_reclaimable_memory(self):
        policy = RequestAwarePolicy()
        queue = GlobalWaitQueue()
        queue.push(entry("first", 500, since=0))
        queue.push(entry("second", 100, since=1))
        idle = ProgramView("idle", 800, ProgramPhase.ACTING, acting_since=0, idle_since=0)
        views = [BackendView("A", 1000, (idle,))]

        batch = policy.schedule(3, views, queue)

        # 200 free + 800 reclaimable
        assert [d.program_id for d in batch.restores] == ["first", "second"]
        assert policy.engine_preempts is True

    def test_request_aware_skips_acting_entries(self):
        queue = GlobalWaitQueue()
        queue.push(entry("tool", 10, ProgramPhase.ACTING))
        batch = RequestAwarePolicy().schedule(0, [BackendView("A", 1000)], queue)
        assert batch.is_noop

    def test_ttl_pin_expiry(self):
        policy = TtlPinPolicy(baselines=BaselineConfig(ttl_ticks=4))
        policy.on_tool_call("p1", "A", 10)
        view = ProgramView("p1", 100, ProgramPhase.ACTING, acting_since=10, idle_since=10)
        views = [BackendView("A", 1000, (view,), taken_at=14)]

        assert policy.schedule(13, views, GlobalWaitQueue()).is_noop
        batch = policy.schedule(14, views, GlobalWaitQueue())
        assert [(d.kind, d.cause) for d in batch.decisions] == [
            (DecisionKind.PAUSE, EvictionCause.TTL_EXPIRY)
        ]

    def test_ttl_pinned_caches_reclaimed_last(self):
        policy = TtlPinPolicy(baselines=BaselineConfig(ttl_ticks=100))
        policy.on_tool_call("pinned", "A", 0)
        order = policy.reclaim_order("A", {"pinned": 0, "free": 5}, 10)
        assert order == ["free", "pinned"]

    def test_ttl_lagged_mean(self):
        policy = TtlPinPolicy(
            baselines=BaselineConfig(ttl_predictor="lagged_mean", ttl_ticks=30, ttl_window=2)
        )
        assert policy.predict_ttl("p1") == 30
        for latency in (10, 20, 40):
            policy.on_tool_result("p1", latency, 0)
        assert policy.predict_ttl("p1") == 30  # mean of the last two

    def test_pinned_routing_binds_round_robin(self):
        policy = PinnedRoutingPolicy(CONSTANT)
        for pid in ("p0", "p1", "p2"):
            policy.on_arrival(pid, ["A", "B"])
        assert policy.binding == {"p0": "A", "p1": "B", "p2": "A"}

        queue = GlobalWaitQueue()
        queue.push(entry("p1", 100))
        views = [BackendView("A", 1000), BackendView("B", 1000, (reasoning("x", 950),))]
        # The only backend p1 may use is full
        assert policy.schedule(0, views, queue).is_noop
