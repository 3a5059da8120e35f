"""Tests for synthetic workload traces."""

import pytest
from app.core.errors import ConfigError, InvalidSpec, UnknownPreset
from app.models.workload import TraceOverrides
from app.services.workload import PRESETS, generate_trace, load_trace, save_trace

from tests.conftest import small_trace


def test_same_seed_same_trace():
    first = generate_trace("mini-swe", 96, 7)
    second = generate_trace("mini-swe", 96, 7)

    assert first == second
    assert len(first.programs) == 96
    assert first.concurrency == 96


def test_other_seed_differs():
    assert generate_trace("mini-swe", 8, 1) != generate_trace("mini-swe", 8, 2)


def test_programs_do_not_depend_on_trace_size():
    small = generate_trace("mini-swe", 4, 3)
    large = generate_trace("mini-swe", 40, 3)
    assert large.programs[:4] == small.programs


def test_mini_swe_shape():
    trace = generate_trace("mini-swe", 50, 0)
    lo, hi = PRESETS["mini-swe"].steps

    for program in trace.programs:
        assert lo <= len(program.steps) <= hi
        assert program.env.disk_units == 2
        assert {s.tool_latency for s in program.steps} == {8}


def test_heavy_init_needs_preparation():
    trace = generate_trace("heavy-init", 4, 0)
    assert all(p.env.prep_latency > 0 for p in trace.programs)
    assert all(p.env.disk_units == 10 for p in trace.programs)


def test_stochastic_tools_vary():
    trace = generate_trace("stochastic-tools", 20, 0)
    latencies = {s.tool_latency for p in trace.programs for s in p.steps}
    assert len(latencies) > 5
    assert min(latencies) >= 1


def test_overrides():
    trace = generate_trace(
        "mini-swe", 10, 0, overrides=TraceOverrides(steps=(3, 3), prompt_tokens=(50, 50))
    )
    assert all(len(p.steps) == 3 and p.prompt_tokens == 50 for p in trace.programs)


def test_closed_loop_concurrency_is_capped():
    assert generate_trace("mini-swe", 4, 0, concurrency=10).concurrency == 4
    assert small_trace(6, concurrency=2).concurrency == 2


def test_open_loop_arrivals():
    trace = generate_trace("mini-swe", 30, 0, arrival_rate_per_minute=120)
    ticks = [p.arrival_tick for p in trace.programs]

    assert trace.arrival.mode == "open"
    assert ticks[0] == 0
    assert ticks == sorted(ticks)


def test_unknown_preset():
    with pytest.raises(UnknownPreset):
        generate_trace("web-shop", 4, 0)


def test_no_programs():
    with pytest.raises(InvalidSpec):
        generate_trace("mini-swe", 0, 0)


def test_save_and_load(tmp_path):
    trace = small_trace(3)
    path = save_trace(trace, tmp_path / "traces" / "t.json")
    assert load_trace(path) == trace


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_trace(tmp_path / "missing.json")


def test_load_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"seed": "x"}', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_trace(path)
