import numpy as np
import pytest
from hypothesis import given, strategies as st

from gemmflow.accel import (BASELINE, FEATURES, OURS, AcceleratorConfig, execute_macro, execute_stream,
                            feature_flags, get_config)
from gemmflow.accel.isa import (Compute, ConfigLd, Fence, Im2col, InstructionStream, LocalAddr, Mvin, Preload,
                                acc, spad, validate_stream)
from gemmflow.errors import FeatureDisabledError, SimulationError
from gemmflow.graph_ir import RequantSpec
from gemmflow.quantizer import requantize_array
from gemmflow.reference import conv2d_acc
from gemmflow.scheduler import conv_params, lower_conv, write_buffer
from _helpers import random_qconv

SMALL = OURS.replace(dim=8, spad_kib=4, acc_kib=2, name="small")


def test_presets():
    assert (OURS.dim, OURS.spad_kib, OURS.acc_kib, OURS.spad_ports, OURS.spad_read_delay) == (32, 512, 128, 2, 8)
    assert (OURS.output_bits, OURS.max_inflight, OURS.freq_mhz, OURS.dataflow) == (18, 32, 150.0, "WS")
    assert (BASELINE.dim, BASELINE.spad_kib, BASELINE.acc_kib, BASELINE.spad_ports) == (16, 256, 64, 1)
    assert (BASELINE.spad_read_delay, BASELINE.output_bits, BASELINE.max_inflight, BASELINE.freq_mhz) == \
        (4, 20, 16, 100.0)


@pytest.mark.parametrize("cfg", [OURS, BASELINE, SMALL])
def test_row_geometry(cfg):
    assert cfg.spad_bytes == cfg.spad_rows * cfg.dim
    assert cfg.acc_bytes == cfg.acc_rows * 4 * cfg.dim
    assert cfg.spad_rows % cfg.spad_banks == 0


def test_config_round_trip_and_hash(tmp_path):
    p = tmp_path / "c.json"
    import json
    p.write_text(json.dumps(BASELINE.to_dict()))
    assert get_config(str(p)) == BASELINE
    assert get_config("ours") is OURS
    assert OURS.config_hash() != BASELINE.config_hash()
    assert OURS.replace(name="x").config_hash() == OURS.replace(name="x").config_hash()
    with pytest.raises(FileNotFoundError):
        get_config("no-such-preset")


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        OURS.replace(dim=0)
    with pytest.raises(ValueError):
        OURS.replace(dim=5, dsp_packing=True)


def test_single_mvin_duration():
    stream = InstructionStream([ConfigLd(0, 32, "i8"), Mvin(0, spad(0), 32, 32)])
    _, rep = execute_stream(OURS, stream, np.zeros(2048, np.uint8), trace=True)
    _, ctrl, start, finish = rep.trace[1]
    assert ctrl == "load" and finish - start == 40 + 1024 // 16 == 104


def test_empty_stream():
    dram = np.arange(64, dtype=np.uint8)
    out, rep = execute_stream(OURS, InstructionStream(), dram)
    assert np.array_equal(out, dram) and rep.total == 0


def test_identity_requant_matmul_saturates():
    rng = np.random.default_rng(0)
    a = rng.integers(-128, 128, (32, 32), dtype=np.int8)
    b = rng.integers(-128, 128, (32, 32), dtype=np.int8)
    _, _, stream, out = execute_macro(OURS, "tiled_matmul", {"a": a, "b": b})
    exact = a.astype(np.int64) @ b.astype(np.int64)
    assert np.array_equal(out.reshape(32, 32), np.clip(exact, -128, 127))
    assert stream.count("Preload") == 1 and stream.count("Compute") == 1


def test_matmul_64_cubed_has_four_preloads():
    rng = np.random.default_rng(1)
    a = rng.integers(-128, 128, (64, 64), dtype=np.int8)
    b = rng.integers(-128, 128, (64, 64), dtype=np.int8)
    _, _, stream, _ = execute_macro(OURS, "tiled_matmul", {"a": a, "b": b})
    assert stream.count("Preload") == 4


def test_conv_3x3_8x8x32_matches_reference():
    rng = np.random.default_rng(2)
    node, spec, x = random_qconv(rng, 8, 8, 32, 32, 3)
    _, _, _, out = execute_macro(OURS, "tiled_conv", {"node": node, "in_spec": spec, "x": x})
    ref = requantize_array(conv2d_acc(x, node.op, node.weight, node.bias, spec.qparams.zero_point), node.requant)
    assert np.array_equal(out.reshape(ref.shape), ref)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(0, 2 ** 31))
def test_matmul_oracle(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(-128, 128, (m, k), dtype=np.int8)
    b = rng.integers(-128, 128, (k, n), dtype=np.int8)
    bias = rng.integers(-1000, 1000, n).astype(np.int32)
    rq = RequantSpec(float(np.float16(rng.uniform(2 ** -10, 2 ** -4))), int(rng.integers(-5, 5)), None)
    _, _, _, out = execute_macro(SMALL, "tiled_matmul", {"a": a, "b": b, "bias": bias, "requant": rq})
    ref = requantize_array(a.astype(np.int64) @ b.astype(np.int64) + bias, rq)
    assert np.array_equal(out.reshape(m, n), ref)


def _conv_stream(seed, cfg=OURS, h=10, cin=40, cout=24, k=3):
    rng = np.random.default_rng(seed)
    node, spec, x = random_qconv(rng, h, h, cin, cout, k)
    stream = lower_conv(node, cfg, in_spec=spec)
    init = np.zeros(stream.dram_size, np.uint8)
    w, b = conv_params(node)
    write_buffer(init, stream.buffers["x"], x)
    write_buffer(init, stream.buffers["w"], w)
    write_buffer(init, stream.buffers["b"], b)
    return stream, init


def test_functional_determinism():
    stream, init = _conv_stream(3)
    d1, r1 = execute_stream(OURS, stream, init, trace=True)
    d2, r2 = execute_stream(OURS, stream, init, trace=True)
    assert np.array_equal(d1, d2) and r1 == r2


@given(st.integers(0, 10 ** 6), st.sampled_from([OURS, BASELINE, SMALL]))
def test_concurrency_never_exceeds_sum_of_busy(seed, cfg):
    stream, init = _conv_stream(seed, cfg)
    _, rep = execute_stream(cfg, stream, init, functional=False)
    assert 0 < rep.total <= rep.load_busy + rep.exec_busy + rep.store_busy


@given(st.integers(0, 10 ** 6), st.lists(st.integers(0, 10 ** 6), min_size=1, max_size=6))
def test_dropping_inner_fences_never_slows(seed, cuts):
    stream, init = _conv_stream(seed, SMALL, h=6, cin=12, cout=10)
    body = [i for i in stream if not isinstance(i, Fence)]
    fenced = list(body)
    for c in sorted({c % len(body) for c in cuts}, reverse=True):
        fenced.insert(c, Fence())
    with_fences = InstructionStream(fenced + [Fence()], stream.buffers)
    without = InstructionStream(body + [Fence()], stream.buffers)
    t_with = execute_stream(SMALL, with_fences, init, functional=False)[1].total
    t_without = execute_stream(SMALL, without, init, functional=False)[1].total
    assert t_without <= t_with


@given(st.integers(0, 10 ** 6), st.sampled_from([4, 8, 16, 32]))
def test_doubling_bus_never_slows(seed, bus):
    stream, init = _conv_stream(seed, SMALL, h=6, cin=12, cout=10)
    slow = execute_stream(SMALL.replace(bus_bytes=bus), stream, init, functional=False)[1].total
    fast = execute_stream(SMALL.replace(bus_bytes=2 * bus), stream, init, functional=False)[1].total
    assert fast <= slow


@given(st.integers(0, 10 ** 6))
def test_dsp_packing_is_bit_identical(seed):
    stream, init = _conv_stream(seed, SMALL, h=6, cin=12, cout=10)
    plain, r1 = execute_stream(SMALL, stream, init)
    packed, r2 = execute_stream(SMALL.replace(dsp_packing=True), stream, init)
    assert np.array_equal(plain, packed) and r1.total == r2.total


def test_stream_text_round_trip():
    stream, _ = _conv_stream(4)
    again = InstructionStream.from_text(stream.to_text())
    assert again.instructions == stream.instructions


def test_local_addr_text():
    assert str(acc(3, True)) == "A:3:acc" and LocalAddr.parse("S:12") == spad(12)


def test_dilation_feature_gate():
    cfg = feature_flags(OURS, {"dilation"})
    plain = InstructionStream([ConfigLd(0, 32, "i8", im2col=Im2col(4, 4, 8, 3, 3, 1, 1, 1, 4)), Fence()])
    validate_stream(cfg, plain)
    dilated = InstructionStream([ConfigLd(0, 32, "i8", im2col=Im2col(4, 4, 8, 3, 3, 1, 1, 1, 4, dilation=2))])
    with pytest.raises(FeatureDisabledError, match="dilation"):
        execute_stream(cfg, dilated)
    execute_stream(OURS, dilated)


def test_all_features_disabled_still_runs_detector_convs():
    from gemmflow.models import yolov7_tiny
    from gemmflow.runtime import compile_accel, partition
    from _helpers import quantized
    cfg = feature_flags(OURS, FEATURES)
    q = quantized(yolov7_tiny(64), n_calib=1)
    compile_accel(partition(q).accel, cfg)      # validates every stream


def test_unknown_feature_rejected():
    with pytest.raises(ValueError):
        feature_flags(OURS, {"warp_drive"})


def test_oversized_block_rejected():
    stream = InstructionStream([ConfigLd(0, 64, "i8"), Mvin(0, spad(0), 40, 32)])
    with pytest.raises(SimulationError, match="exceeds dim"):
        execute_stream(OURS, stream, np.zeros(4096, np.uint8))


def test_compute_without_preload_is_an_error():
    stream = InstructionStream([Compute(spad(0), 4, 4)])
    with pytest.raises(SimulationError):
        execute_stream(OURS, stream, np.zeros(64, np.uint8))


def test_saturation_stage_clips_when_enabled():
    a = np.full((32, 32), 127, np.int8)
    b = np.full((32, 32), 127, np.int8)
    rq = RequantSpec(2 ** -10, 0, None)
    cfg = OURS.replace(saturate_outputs=True)
    _, _, _, sat = execute_macro(cfg, "tiled_matmul", {"a": a, "b": b, "requant": rq})
    _, _, _, exact = execute_macro(OURS, "tiled_matmul", {"a": a, "b": b, "requant": rq})
    assert int(exact.flat[0]) == requantize_array(np.int64(32 * 127 * 127), rq)
    assert int(sat.flat[0]) == requantize_array(np.int64(2 ** 17 - 1), rq)
