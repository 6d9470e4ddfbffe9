"""Per-tensor int8 quantization, calibration and the fp16-scale requantizer."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import QuantizationError
from .graph_ir import (Dequantize, DType, Graph, Node, QuantParams, Quantize, RequantSpec,
                       TensorSpec, f16_round)

I8_MIN, I8_MAX = -128, 127
DEGENERATE_WIDTH = 1e-6

# ops that run on the accelerator once quantized
ELIGIBLE = ("Conv2D", "MaxPool2D", "ResizeNearest", "Concat", "Add")


# --------------------------------------------------------------------------- #
# Scalar / array arithmetic shared by the reference executor and the simulator
# --------------------------------------------------------------------------- #

def requantize_array(acc, spec: RequantSpec) -> np.ndarray:
    """Vectorised requantization of i32 accumulators to i8.

    The accumulator is converted to f32 and multiplied by the f16-rounded
    multiplier in f32; the product is rounded half-to-even, offset by the
    output zero point, clamped by the fused activation and saturated.
    """
    acc = np.asarray(acc)
    prod = acc.astype(np.float32) * np.float32(spec.multiplier_f16)
    out = np.rint(prod).astype(np.int64) + spec.output_zero_point
    if spec.activation_clamp is not None:
        out = np.clip(out, *spec.activation_clamp)
    return np.clip(out, I8_MIN, I8_MAX).astype(np.int8)


def requantize(acc: int, spec: RequantSpec) -> int:
    return int(requantize_array(np.int64(acc), spec))


def quantize_array(x, qp: QuantParams) -> np.ndarray:
    """f32 -> i8 affine quantization (round half to even, saturating)."""
    q = np.rint(np.asarray(x, dtype=np.float32) / np.float32(qp.scale)).astype(np.int64) + qp.zero_point
    return np.clip(q, I8_MIN, I8_MAX).astype(np.int8)


def dequantize_array(q, qp: QuantParams) -> np.ndarray:
    return ((np.asarray(q).astype(np.float32) - np.float32(qp.zero_point)) * np.float32(qp.scale)).astype(np.float32)


def affine_qparams(lo: float, hi: float) -> QuantParams:
    """Asymmetric per-tensor parameters covering [lo, hi] (0 included)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo <= 0:
        raise QuantizationError(f"degenerate range [{lo}, {hi}]")
    scale = (hi - lo) / 255.0
    zp = int(np.clip(np.rint(I8_MIN - lo / scale), I8_MIN, I8_MAX))
    return QuantParams(scale, zp)


def symmetric_weight_qparams(w) -> QuantParams:
    m = float(np.max(np.abs(w))) if np.size(w) else 0.0
    if m == 0.0:
        m = DEGENERATE_WIDTH
    return QuantParams(m / 127.0, 0)


def make_requant(multiplier: float, out_qp: QuantParams, activation: str = "none") -> RequantSpec:
    m16 = f16_round(multiplier)
    if not (m16 > 0 and np.isfinite(m16)):
        raise QuantizationError(f"requant multiplier {multiplier!r} not representable as a positive float16")
    clamp = None
    if activation == "relu6":
        hi = int(quantize_array(np.float32(6.0), out_qp))
        clamp = (out_qp.zero_point, hi)
    elif activation != "none":
        raise QuantizationError(
            f"activation {activation!r} is not supported by the accelerator; run replace_activations first")
    return RequantSpec(m16, out_qp.zero_point, clamp)


# --------------------------------------------------------------------------- #
# Calibration
# --------------------------------------------------------------------------- #

@dataclass
class CalibrationStats:
    ranges: dict = field(default_factory=dict)     # tensor id -> (min, max)

    def __getitem__(self, tensor_id):
        return self.ranges[tensor_id]

    def __contains__(self, tensor_id):
        return tensor_id in self.ranges

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = dict(self.ranges)
        for k, (lo, hi) in other.ranges.items():
            if k in out:
                out[k] = (min(out[k][0], lo), max(out[k][1], hi))
            else:
                out[k] = (lo, hi)
        return CalibrationStats(out)

    def to_json(self) -> str:
        body = {k: [repr(float(lo)), repr(float(hi))] for k, (lo, hi) in sorted(self.ranges.items())}
        return json.dumps({"format": "gemmflow-calibration", "version": 1, "ranges": body}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationStats":
        d = json.loads(text)
        return cls({k: (float(lo), float(hi)) for k, (lo, hi) in d["ranges"].items()})


def _widen(lo, hi):
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi <= lo:
        hi = lo + DEGENERATE_WIDTH
    return float(np.float32(lo)), float(np.float32(hi))


def calibrate(g: Graph, samples: Sequence) -> CalibrationStats:
    """Collect zero-inclusive per-tensor (min, max) over calibration inputs."""
    from .reference import run_graph

    samples = list(samples)
    if not samples:
        raise QuantizationError("calibration needs at least one sample")
    stats = CalibrationStats()
    for s in samples:
        values = run_graph(g, s, capture=True)
        seen = {}
        for tid, v in values.items():
            if v.dtype == np.float32 and v.size:
                seen[tid] = (float(v.min()), float(v.max()))
        stats = stats.merge(CalibrationStats(seen))
    stats.ranges = {k: _widen(lo, hi) for k, (lo, hi) in stats.ranges.items()}
    return stats


# --------------------------------------------------------------------------- #
# Graph quantization
# --------------------------------------------------------------------------- #

class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _eligible(g: Graph) -> set:
    return {n.id for n in g.nodes if n.kind in ELIGIBLE and n.output.dtype == DType.f32}


def quantize_graph(g: Graph, stats: CalibrationStats) -> Graph:
    """Rewrite the accelerator-bound part of a float graph to int8.

    Tensors joined by data-movement ops (MaxPool, Resize, Concat) and the
    two operands of an Add share one set of quantization parameters so
    those ops need no rescaling.  Conv2D weights are quantized
    symmetrically, activations asymmetrically, biases to i32 with the
    input zero-point cross term folded in.
    """
    eligible = _eligible(g)
    specs = g.tensor_specs()

    # tensors that need i8 parameters: outputs of eligible nodes + f32 tensors they read
    qtensors = set(eligible)
    for n in g.nodes:
        if n.id in eligible:
            qtensors.update(n.inputs)
    uf = _UnionFind()
    for t in qtensors:
        uf.find(t)
    for n in g.nodes:
        if n.id not in eligible:
            continue
        if n.kind in ("MaxPool2D", "ResizeNearest", "Concat"):
            for t in n.inputs:
                uf.union(n.id, t)
        elif n.kind == "Add":
            uf.union(n.inputs[0], n.inputs[1])

    classes = {}
    for t in sorted(qtensors):
        if t not in stats:
            raise QuantizationError(f"missing calibration stats for tensor {t!r}")
        lo, hi = stats[t]
        r = uf.find(t)
        plo, phi = classes.get(r, (lo, hi))
        classes[r] = (min(plo, lo), max(phi, hi))
    qparams = {}
    for t in qtensors:
        lo, hi = classes[uf.find(t)]
        qparams[t] = affine_qparams(lo, hi)

    def i8(t, shape):
        return TensorSpec(shape, DType.i8, qparams[t])

    nodes = []
    # boundary conversions: f32 tensor read by an i8 node
    qnames = {}
    for t in sorted({t for n in g.nodes if n.id in eligible for t in n.inputs if t not in eligible}):
        qid = f"{t}_q"
        qnames[t] = qid
        nodes.append(Node(qid, Quantize(), (t,), i8(t, specs[t].shape)))

    def src(t):
        return qnames.get(t, t)

    for n in g.nodes:
        if n.id not in eligible:
            nodes.append(n)
            continue
        ins = tuple(src(t) for t in n.inputs)
        out_spec = i8(n.id, n.output.shape)
        if n.kind == "Conv2D":
            nodes.append(_quantize_conv(n, ins, qparams[n.inputs[0]], out_spec))
        elif n.kind == "Add":
            in_qp = qparams[n.inputs[0]]
            rq = make_requant(in_qp.scale / out_spec.qparams.scale, out_spec.qparams)
            bias = np.full(n.output.c, -2 * in_qp.zero_point, dtype=np.int32)
            nodes.append(Node(n.id, n.op, ins, out_spec, bias=bias, requant=rq))
        else:
            nodes.append(Node(n.id, n.op, ins, out_spec))

    # i8 tensor read by a float node (or exported): dequantize
    dq_nodes = {}

    def dq_of(t):
        if t not in dq_nodes:
            dq_nodes[t] = Node(f"{t}_dq", Dequantize(), (t,), TensorSpec(specs[t].shape))
        return dq_nodes[t].id

    final = []
    for n in nodes:
        if n.kind not in ("Quantize", "Dequantize") and n.id not in eligible:
            n = n.with_(inputs=tuple(dq_of(t) if t in eligible else t for t in n.inputs))
        final.append(n)
    outputs = tuple(dq_of(t) if t in eligible else t for t in g.outputs)
    final.extend(dq_nodes.values())
    meta = dict(g.metadata)
    meta["quantized"] = True
    return Graph(g.inputs, tuple(final), outputs, name=g.name, metadata=meta)


def _quantize_conv(n: Node, ins, in_qp: QuantParams, out_spec: TensorSpec) -> Node:
    w = np.asarray(n.weight, dtype=np.float32)
    wq_params = symmetric_weight_qparams(w)
    qw = np.clip(np.rint(w / np.float32(wq_params.scale)), -127, 127).astype(np.int8)
    acc_scale = float(np.float32(in_qp.scale)) * float(np.float32(wq_params.scale))
    bias = np.zeros(n.op.cout, dtype=np.int64)
    if n.bias is not None:
        bias = np.rint(np.asarray(n.bias, dtype=np.float64) / acc_scale).astype(np.int64)
    # fold the activation zero-point cross term: sum((q - zp) * w) = sum(q * w) - zp * sum(w)
    bias = bias - in_qp.zero_point * qw.astype(np.int64).sum(axis=(0, 1, 2))
    if np.abs(bias).max(initial=0) >= 2 ** 31:
        raise QuantizationError(f"folded bias of {n.id!r} overflows int32")
    rq = make_requant(acc_scale / out_spec.qparams.scale, out_spec.qparams, n.op.activation)
    op = replace(n.op, has_bias=True)
    return Node(n.id, op, ins, out_spec, weight=qw, bias=bias.astype(np.int32),
                weight_qparams=wq_params, requant=rq)


def frontier_is_cut(g: Graph) -> bool:
    """True when i8 and f32 nodes only meet through Quantize/Dequantize."""
    for n in g.nodes:
        if n.kind in ("Quantize", "Dequantize"):
            continue
        for t in n.inputs:
            if g.spec(t).dtype != n.output.dtype:
                return False
    return True
