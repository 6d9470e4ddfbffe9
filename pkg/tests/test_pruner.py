import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gemmflow.errors import PruningError
from gemmflow.graph_ir import graphs_equal, param_count
from gemmflow.models import GraphBuilder, toy_detector, yolov7_tiny
from gemmflow.pruner import (PruningPlan, build_connectivity, bundled_plan, prune_step, rank_channels, run_plan,
                             stats_csv)
from gemmflow.reference import run_graph


def _concat_graph():
    b = GraphBuilder(8, seed=3)
    a = b.conv("image", 32, node_id="A")
    bb = b.conv("image", 32, node_id="B")
    cat = b.concat([a, bb])
    c = b.conv(cat, 16, node_id="C")
    return b.build([c]), c


def _add_graph(ch=4):
    b = GraphBuilder(8, seed=5)
    a = b.conv("image", ch, node_id="A")
    bb = b.conv("image", ch, node_id="B")
    s = b.add(a, bb)
    c = b.conv(s, 8, node_id="C")
    return b.build([c])


def test_concat_groups_and_offsets():
    g, _ = _concat_graph()
    groups = build_connectivity(g)
    assert groups["A"].consumers == {("C", 0)}
    assert groups["B"].consumers == {("C", 32)}
    assert groups["A"].member_ids == ("A",) and groups["B"].member_ids == ("B",)


def test_add_merges_into_one_group():
    groups = build_connectivity(_add_graph())
    assert groups["A"].member_ids == ("A", "B")
    assert "B" not in groups


def test_chain_one_group_per_conv():
    b = GraphBuilder(8)
    x = b.conv("image", 8, node_id="A")
    x = b.conv(x, 8, node_id="B")
    groups = build_connectivity(b.build([x]))
    assert groups["A"].consumers == {("B", 0)}
    assert groups["B"].consumers == set() and groups["B"].pinned


def test_toy_detector_offsets_through_concats():
    groups = build_connectivity(toy_detector())
    assert groups["conv2"].consumers == {("conv3", 0), ("conv4", 32), ("head", 96)}
    assert groups["head"].pinned and not groups["conv0"].pinned


def test_rate_quarter_on_64_filters():
    b = GraphBuilder(8)
    x = b.conv("image", 64, node_id="A")
    y = b.conv(x, 8, node_id="B")
    g = b.build([y])
    out, _ = prune_step(g, build_connectivity(g), ["A"], 0.25)
    assert out.node("A").op.cout == 48 and out.node("B").weight.shape[2] == 48


def _drop_channel(g, conv, ch):
    """Make one filter the weakest so pruning with rate 1/C removes exactly it."""
    nodes = []
    for n in g.nodes:
        if n.id == conv:
            w = n.weight.copy()
            w[..., ch] = 0
            n = n.with_(weight=w)
        nodes.append(n)
    return g.replace_nodes(nodes)


@pytest.mark.parametrize("member,channel,lost", [("A", 5, 5), ("B", 5, 37)])
def test_concat_pruning_removes_offset_input_channel(member, channel, lost):
    g, _ = _concat_graph()
    g = _drop_channel(g, member, channel)
    out, _ = prune_step(g, build_connectivity(g), [member], 1 / 32)
    before, after = g.node("C").weight, out.node("C").weight
    keep = [i for i in range(64) if i != lost]
    np.testing.assert_array_equal(after, before[:, :, keep, :])


def test_add_tied_group_drops_same_indices_by_summed_l1():
    g = _add_graph(4)
    wa, wb = g.node("A").weight, g.node("B").weight
    la, lb = np.abs(wa).sum(axis=(0, 1, 2)), np.abs(wb).sum(axis=(0, 1, 2))
    # brute force: the pair of channels with the smallest combined summed L1
    best = min(itertools.combinations(range(4), 2), key=lambda p: (sum(la[i] + lb[i] for i in p), p))
    out, _ = prune_step(g, build_connectivity(g), ["B"], 0.5)
    keep = [i for i in range(4) if i not in best]
    np.testing.assert_array_equal(out.node("A").weight, wa[..., keep])
    np.testing.assert_array_equal(out.node("B").weight, wb[..., keep])
    np.testing.assert_array_equal(out.node("C").weight, g.node("C").weight[:, :, keep, :])


def test_rank_ties_break_by_lower_index():
    g = _drop_channel(_drop_channel(_concat_graph()[0], "A", 9), "A", 3)
    order = rank_channels(g, build_connectivity(g)["A"])
    assert list(order[:2]) == [3, 9]


def test_empty_plan_is_identity():
    g = toy_detector()
    out, stats = run_plan(g, PruningPlan())
    assert graphs_equal(out, g) and stats == []


def test_pinned_and_unknown_targets_rejected():
    g = toy_detector()
    groups = build_connectivity(g)
    with pytest.raises(PruningError, match="cannot be pruned"):
        prune_step(g, groups, ["head"], 0.5)
    with pytest.raises(PruningError, match="unknown"):
        prune_step(g, groups, ["nope"], 0.5)
    with pytest.raises(PruningError):
        prune_step(g, groups, ["conv0"], 1.0)


def test_partial_add_tie_is_unsupported():
    b = GraphBuilder(8)
    a = b.conv("image", 4)
    c = b.conv("image", 4)
    cat = b.concat([a, c])
    d = b.conv("image", 8)
    s = b.add(cat, d)
    with pytest.raises(PruningError, match="unsupported topology"):
        build_connectivity(b.build([b.conv(s, 2)]))


def test_quantized_graph_is_rejected():
    from _helpers import quantized
    q = quantized(toy_detector())
    with pytest.raises(PruningError, match="before quantization"):
        prune_step(q, build_connectivity(q), "*", 0.25)


@given(st.floats(0.01, 0.6), st.integers(0, 3))
def test_prune_step_keeps_graph_executable(rate, seed):
    g = toy_detector(32, seed=seed)
    out, stats = prune_step(g, build_connectivity(g), "*", rate)
    res = run_graph(out, np.random.default_rng(seed).random((1, 32, 32, 3), dtype=np.float32))
    assert res["nms"].shape[-1] == 6
    # analytic count from surviving channel sets
    specs = out.tensor_specs()
    analytic = sum(n.op.kh * n.op.kw * specs[n.inputs[0]].c * n.op.cout + n.op.cout for n in out.nodes_of("Conv2D"))
    assert stats.params_after == analytic == param_count(out)


def test_tiny_rate_is_identity():
    g = toy_detector()
    out, stats = prune_step(g, build_connectivity(g), "*", 0.01)
    assert graphs_equal(out, g) and stats.sparsity == 0


def test_removing_zero_filters_preserves_outputs():
    g, _ = _concat_graph()
    nodes = []
    for n in g.nodes:
        if n.id == "A":
            w, bias = n.weight.copy(), n.bias.copy()
            w[..., :8], bias[:8] = 0, 0
            n = n.with_(weight=w, bias=bias)
        nodes.append(n)
    g = g.replace_nodes(nodes)
    out, _ = prune_step(g, build_connectivity(g), ["A"], 0.25)
    assert out.node("A").op.cout == 24
    x = np.random.default_rng(0).random((1, 8, 8, 3), dtype=np.float32)
    np.testing.assert_array_equal(run_graph(out, x)["C"], run_graph(g, x)["C"])


def test_bundled_plan_40():
    g, stats = run_plan(yolov7_tiny(64), bundled_plan("yolov7_tiny_40"))
    assert len(stats) == 14
    assert 0.39 <= stats[-1].sparsity <= 0.41


def test_stats_csv_columns():
    _, stats = run_plan(toy_detector(), PruningPlan((("*", 0.25), ("*", 0.25))))
    lines = stats_csv(stats).splitlines()
    assert lines[0].startswith("iteration,sparsity,gop")
    assert len(lines) == 3
    assert stats[1].sparsity > stats[0].sparsity > 0


def test_plan_json_round_trip():
    p = PruningPlan((("*", 0.1), (("conv0", "conv2"), 0.3)), "x")
    assert PruningPlan.from_json(p.to_json()) == p
    with pytest.raises(PruningError):
        PruningPlan((("*", 1.5),))
