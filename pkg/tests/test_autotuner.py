import numpy as np
import pytest
from hypothesis import given, strategies as st

from gemmflow.accel import OURS
from gemmflow.autotuner import (TuningRecord, _choose, enumerate_space, fingerprint, full_space, read_records,
                                replay_graph, simulate_cycles, tune_graph, tune_layer, write_records)
from gemmflow.models import GraphBuilder
from gemmflow.scheduler import LOOP_ORDERS, Gemm, Schedule, conv_geometry, default_gemm_schedule
from _helpers import quantized, random_qconv

SMALL = OURS.replace(dim=8, spad_kib=4, acc_kib=2, name="small")


def _layer(seed=0, h=16, cin=64, cout=64, k=3):
    return random_qconv(np.random.default_rng(seed), h, h, cin, cout, k)[:2]


def test_single_tile_space_has_twelve_variants():
    d = OURS.dim
    space = enumerate_space(Gemm(d, d, d), OURS, budget=100)
    assert len(space) == 12
    assert {s.loop_order for s in space} == set(LOOP_ORDERS)
    assert {s.double_buffer for s in space} == {False, True}
    assert all((s.tile_i, s.tile_j, s.tile_k) == (1, 1, 1) for s in space)


def test_budget_one_is_the_default():
    gemm = Gemm(500, 300, 200)
    assert enumerate_space(gemm, SMALL, 1) == [default_gemm_schedule(gemm, SMALL)]


def test_large_budget_is_the_full_space():
    gemm = Gemm(40, 24, 16)
    full = full_space(gemm, SMALL)
    got = enumerate_space(gemm, SMALL, len(full) + 5)
    assert got == full and len(set(got)) == len(got)


@given(st.integers(1, 60), st.integers(0, 5))
def test_sampled_space_contains_default_and_grows_with_budget(budget, seed):
    gemm = Gemm(300, 200, 100)
    small, big = enumerate_space(gemm, SMALL, budget, seed), enumerate_space(gemm, SMALL, budget + 10, seed)
    assert default_gemm_schedule(gemm, SMALL) in small
    assert len(small) == min(budget, len(full_space(gemm, SMALL)))
    assert set(small) <= set(big)


def test_double_buffering_hides_memory_stalls():
    node, spec = _layer()
    single = simulate_cycles(node, spec, OURS, Schedule(1, 1, 1))
    double = simulate_cycles(node, spec, OURS, Schedule(1, 1, 1, double_buffer=True))
    assert double < single
    best, records = tune_layer(node, OURS, 64, in_spec=spec)
    assert best.source == "tuned" and best.cycles_best < best.cycles_default
    assert min(r.cycles for r in records) == best.cycles_best


def test_budget_one_falls_back_to_default():
    node, spec = _layer()
    best, records = tune_layer(node, OURS, 1, in_spec=spec)
    assert best.source == "default" and best.cycles_best == best.cycles_default
    assert len(records) == 1 and records[0].is_default


def test_equal_cycles_pick_smaller_schedule():
    default = Schedule(4, 4, 4)
    a, b = Schedule(1, 2, 3), Schedule(1, 2, 3, ("i", "k", "j"))
    best = _choose([(default, 100, None), (b, 50, None), (a, 50, None)], default)
    assert best.schedule == a and best.source == "tuned"
    assert _choose([(default, 50, None), (a, 50, None)], default).source == "default"


def test_failed_candidates_are_recorded_not_chosen():
    default = Schedule(4, 4, 4)
    best = _choose([(default, 100, None), (Schedule(1, 1, 1), None, "SimulationError: boom")], default)
    assert best.schedule == default


def _twin_graph():
    b = GraphBuilder(16, seed=1)
    x = b.conv("image", 16, 3)
    y = b.conv(x, 16, 3)
    z = b.conv(y, 16, 3)
    return quantized(b.build([z]))


def test_identical_layers_tuned_once():
    q = _twin_graph()
    res = tune_graph(q, SMALL, 6)
    fps = res.fingerprints
    convs = [n.id for n in q.nodes_of("Conv2D")]
    assert fps[convs[1]] == fps[convs[2]] != fps[convs[0]]
    assert len({r.fingerprint for r in res.records}) == 2
    assert res.table[convs[1]] == res.table[convs[2]]


def test_fallback_and_budget_monotonicity():
    q = _twin_graph()
    r4, r16 = tune_graph(q, SMALL, 4), tune_graph(q, SMALL, 16)
    for k in r4.table:
        assert r4.table[k].cycles_best <= r4.table[k].cycles_default
        assert r16.table[k].cycles_best <= r4.table[k].cycles_best


def test_records_are_deterministic_and_replayable(tmp_path):
    q = _twin_graph()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_records(a, tune_graph(q, SMALL, 8, seed=3).records)
    write_records(b, tune_graph(q, SMALL, 8, seed=3, jobs=2).records)
    assert a.read_bytes() == b.read_bytes()
    recs = read_records(a)
    again = replay_graph(q, SMALL, recs)
    assert again.schedules == tune_graph(q, SMALL, 8, seed=3).schedules


def test_record_json_round_trip():
    r = TuningRecord("abc", Schedule(1, 2, 3, ("j", "k", "i"), True), 123, 7, False, None)
    assert TuningRecord.from_json(r.to_json()) == r


def test_fingerprint_ignores_weights_but_not_shape_or_config():
    n1, s1 = _layer(seed=1)
    n2, s2 = _layer(seed=2)
    n3, s3 = _layer(seed=1, cout=32)
    assert fingerprint(n1, s1, OURS) == fingerprint(n2, s2, OURS)
    assert fingerprint(n1, s1, OURS) != fingerprint(n3, s3, OURS)
    assert fingerprint(n1, s1, OURS) != fingerprint(n1, s1, SMALL)


def test_replay_requires_every_layer():
    q = _twin_graph()
    recs = tune_graph(q, SMALL, 2).records
    first = recs[0].fingerprint
    with pytest.raises(Exception, match="no records"):
        replay_graph(q, SMALL, [r for r in recs if r.fingerprint != first])
