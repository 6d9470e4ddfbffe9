import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gemmflow.errors import ModelError
from gemmflow.graph_ir import (Concat, Conv2D, Graph, Node, TensorSpec, count_gop, deserialize, downsample_factor,
                               graphs_equal, load_model, replace_activations, rescale_input, save_model, serialize)
from gemmflow.models import GraphBuilder, conv_only, toy_detector, yolov7_tiny
from _helpers import quantized


def _minimal():
    rng = np.random.default_rng(0)
    node = Node("conv", Conv2D(3, 3, 4), ("x",), TensorSpec((1, 8, 8, 4)),
                weight=rng.standard_normal((3, 3, 3, 4)).astype(np.float32),
                bias=np.zeros(4, np.float32))
    return Graph((("x", TensorSpec((1, 8, 8, 3))),), (node,), ("conv",))


def test_minimal_model_loads(tmp_path):
    path = save_model(_minimal(), tmp_path / "m.json")
    g = load_model(path)
    assert len(g.nodes) == 1
    assert g.spec("conv").shape == (1, 8, 8, 4)


def test_concat_of_two_32_channel_tensors_has_64():
    b = GraphBuilder(8)
    a, c = b.conv("image", 32), b.conv("image", 32)
    cat = b.concat([a, c])
    assert b.build([cat]).spec(cat).c == 64


def test_weight_ref_past_blob_end_is_rejected():
    manifest, blob = serialize(_minimal())
    manifest["nodes"][0]["weight_ref"][0] += 8
    del manifest["weights"]["size"], manifest["weights"]["sha256"]
    with pytest.raises(ModelError, match="blob size mismatch"):
        deserialize(manifest, blob)


def test_truncated_blob_is_rejected(tmp_path):
    path = save_model(_minimal(), tmp_path / "m.json")
    blob = path.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ModelError, match="blob size mismatch"):
        load_model(path)


def test_missing_blob_is_an_io_error(tmp_path):
    path = save_model(_minimal(), tmp_path / "m.json")
    path.with_suffix(".bin").unlink()
    with pytest.raises(FileNotFoundError):
        load_model(path)


def test_dangling_input_names_node_and_field():
    manifest, blob = serialize(_minimal())
    manifest["nodes"][0]["inputs"] = ["nope"]
    with pytest.raises(ModelError, match="'conv'.*'inputs'|dangling"):
        deserialize(manifest, blob)


@pytest.mark.parametrize("make", [toy_detector, lambda: quantized(toy_detector())])
def test_serialization_round_trip(tmp_path, make):
    g = make()
    again = load_model(save_model(g, tmp_path / "g.json"))
    assert graphs_equal(g, again)
    m1, b1 = serialize(g)
    m2, b2 = serialize(again)
    assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True) and b1 == b2


def _acts(g):
    return [n.op.activation for n in g.nodes_of("Conv2D")]


def test_replace_activations_rewrites_leaky_only():
    b = GraphBuilder(8)
    x = b.conv("image", 4, act="leaky_relu")
    x = b.conv(x, 4, act="relu6")
    x = b.conv(x, 4, act="none")
    g = replace_activations(b.build([x]))
    assert _acts(g) == ["relu6", "relu6", "none"]


def test_replace_activations_three_leaky():
    b = GraphBuilder(8)
    x = "image"
    for _ in range(3):
        x = b.conv(x, 4)
    assert _acts(replace_activations(b.build([x]))) == ["relu6"] * 3


def test_replace_activations_without_leaky_is_identity():
    g = conv_only(64)
    assert graphs_equal(replace_activations(g), g)


def test_replace_activations_idempotent():
    once = replace_activations(toy_detector())
    assert graphs_equal(replace_activations(once), once)


def test_rescale_640_to_480_scales_every_map_by_three_quarters():
    big, small = conv_only(640), rescale_input(conv_only(640), (480, 480))
    for n in big.nodes:
        hb, wb = big.spec(n.id).shape[1:3]
        hs, ws = small.spec(n.id).shape[1:3]
        assert (hs * 4, ws * 4) == (hb * 3, wb * 3)


def test_rescale_to_current_size_is_identity():
    g = toy_detector(64)
    assert graphs_equal(rescale_input(g, (64, 64)), g)


def test_rescale_indivisible_size_fails():
    g = yolov7_tiny(64)
    assert downsample_factor(g) == 32
    with pytest.raises(ModelError, match="multiple of 32"):
        rescale_input(g, (100, 100))


def test_gop_of_single_conv():
    b = GraphBuilder(240, channels=16)
    c = b.conv("image", 32, 3)
    oc = count_gop(b.build([c]))
    assert oc.total_ops == 240 * 240 * 32 * 9 * 16 * 2 == 530_841_600
    assert oc.gop == pytest.approx(0.5308416)


def test_gop_of_empty_graph_is_zero():
    g = Graph((("x", TensorSpec((1, 4, 4, 3))),), (), ("x",))
    assert count_gop(g).gop == 0


def test_conv_only_ratio_480_over_640_is_exact():
    r = count_gop(conv_only(480)).total_ops / count_gop(conv_only(640)).total_ops
    assert r == 0.5625


@given(st.integers(1, 40), st.integers(1, 40))
def test_gop_scales_exactly_with_area(a, b):
    base = count_gop(conv_only(8)).total_ops
    g = rescale_input(conv_only(8), (8 * a, 8 * b))
    assert count_gop(g).total_ops == base * a * b


@given(st.lists(st.tuples(st.integers(1, 12), st.sampled_from([1, 3]), st.sampled_from([1, 2])),
                min_size=1, max_size=4),
       st.booleans())
def test_random_chain_round_trips(tmp_path_factory, layers, with_concat):
    b = GraphBuilder(16, seed=len(layers))
    x = "image"
    for cout, k, s in layers:
        x = b.conv(x, cout, k, s)
    if with_concat:
        x = b.concat([x, b.conv(x, 3)])
    g = b.build([x])
    path = save_model(g, tmp_path_factory.mktemp("rt") / "g.json")
    assert graphs_equal(load_model(path), g)


def test_shape_propagation_is_pure():
    g1, g2 = toy_detector(64), toy_detector(64)
    assert [n.output for n in g1.nodes] == [n.output for n in g2.nodes]


def test_cycle_is_rejected():
    a = Node("a", Concat(), ("x", "b"), TensorSpec((1, 2, 2, 2)))
    b = Node("b", Concat(), ("a",), TensorSpec((1, 2, 2, 2)))
    with pytest.raises(ModelError):
        Graph((("x", TensorSpec((1, 2, 2, 1))),), (a, b), ("b",))
