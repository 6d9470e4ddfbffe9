"""Graph representation: tensor specs, operators, nodes and shape rules.

All tensors are NHWC with batch 1.  Graph values are immutable; every
transform builds a new :class:`Graph`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ..errors import ModelError


class DType(str, enum.Enum):
    i8 = "i8"
    i32 = "i32"
    f16 = "f16"
    f32 = "f32"

    @property
    def nbytes(self) -> int:
        return {"i8": 1, "i32": 4, "f16": 2, "f32": 4}[self.value]

    @property
    def numpy(self):
        return {"i8": np.int8, "i32": np.int32, "f16": np.float16, "f32": np.float32}[self.value]


def f16_round(x: float) -> float:
    """Round a float to the nearest IEEE binary16 value (ties to even)."""
    return float(np.float16(np.float32(x)))


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ModelError(f"quantization scale must be positive and finite, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ModelError(f"zero point {self.zero_point} outside [-128, 127]")
        # store the f32 master value
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def scale_f16(self) -> float:
        return f16_round(self.scale)


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple
    dtype: DType = DType.f32
    qparams: Optional[QuantParams] = None

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "dtype", DType(self.dtype))
        if len(shape) != 4 or shape[0] != 1:
            raise ModelError(f"tensor shape must be NHWC with batch 1, got {shape}")
        if any(d < 1 for d in shape):
            raise ModelError(f"tensor dimensions must be >= 1, got {shape}")
        if self.dtype == DType.i8 and self.qparams is None:
            raise ModelError("i8 tensor requires quantization parameters")
        if self.dtype != DType.i8 and self.qparams is not None:
            raise ModelError(f"{self.dtype.value} tensor must not carry quantization parameters")

    @property
    def h(self) -> int:
        return self.shape[1]

    @property
    def w(self) -> int:
        return self.shape[2]

    @property
    def c(self) -> int:
        return self.shape[3]

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.nbytes


# --------------------------------------------------------------------------- #
# Operators
# --------------------------------------------------------------------------- #

ACTIVATIONS = ("none", "relu6", "leaky_relu")
PADDINGS = ("same", "valid")


@dataclass(frozen=True)
class Conv2D:
    kh: int
    kw: int
    cout: int
    stride: int = 1
    padding: str = "same"
    has_bias: bool = True
    activation: str = "none"
    alpha: float = 0.1

    kind = "Conv2D"

    def __post_init__(self):
        if self.padding not in PADDINGS:
            raise ModelError(f"unsupported padding {self.padding!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unsupported activation {self.activation!r}")
        if min(self.kh, self.kw, self.cout, self.stride) < 1:
            raise ModelError("Conv2D kernel, channel and stride values must be >= 1")


@dataclass(frozen=True)
class MaxPool2D:
    kernel: int
    stride: int
    padding: str = "valid"

    kind = "MaxPool2D"

    def __post_init__(self):
        if self.padding not in PADDINGS:
            raise ModelError(f"unsupported padding {self.padding!r}")


@dataclass(frozen=True)
class ResizeNearest:
    factor: int

    kind = "ResizeNearest"

    def __post_init__(self):
        if not isinstance(self.factor, (int, np.integer)) or isinstance(self.factor, bool) or self.factor < 1:
            raise ModelError(f"resize factor must be a positive integer, got {self.factor!r}")


@dataclass(frozen=True)
class Concat:
    axis: int = 3

    kind = "Concat"

    def __post_init__(self):
        if self.axis != 3:
            raise ModelError("Concat only supports the channel axis")


@dataclass(frozen=True)
class Add:
    kind = "Add"


@dataclass(frozen=True)
class Quantize:
    kind = "Quantize"


@dataclass(frozen=True)
class Dequantize:
    kind = "Dequantize"


@dataclass(frozen=True)
class Sigmoid:
    kind = "Sigmoid"


@dataclass(frozen=True)
class BoxDecode:
    stride: int
    anchors: tuple
    num_classes: int

    kind = "BoxDecode"

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple((float(a), float(b)) for a, b in self.anchors))

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def row_width(self) -> int:
        return 5 + self.num_classes


@dataclass(frozen=True)
class NMS:
    iou_thresh: float = 0.45
    conf_thresh: float = 0.25
    max_det: int = 100

    kind = "NMS"


OPS = {cls.kind: cls for cls in
       (Conv2D, MaxPool2D, ResizeNearest, Concat, Add, Quantize, Dequantize, Sigmoid, BoxDecode, NMS)}

# element-wise data movement ops that keep the channel layout of their input
CHANNEL_PRESERVING = ("MaxPool2D", "ResizeNearest")
POSTPROCESS = ("Sigmoid", "BoxDecode", "NMS")


@dataclass(frozen=True)
class RequantSpec:
    """Output scaling applied when an i32 accumulator is written back as i8."""

    multiplier_f16: float
    output_zero_point: int = 0
    activation_clamp: Optional[tuple] = None

    def __post_init__(self):
        m = f16_round(self.multiplier_f16)
        if m != self.multiplier_f16:
            raise ModelError(f"multiplier {self.multiplier_f16!r} is not representable in float16")
        if not (m > 0 and math.isfinite(m)):
            raise ModelError(f"requant multiplier must be positive and finite, got {m}")
        if not -128 <= self.output_zero_point <= 127:
            raise ModelError("output zero point outside [-128, 127]")
        if self.activation_clamp is not None:
            lo, hi = (int(v) for v in self.activation_clamp)
            if not -128 <= lo <= hi <= 127:
                raise ModelError(f"activation clamp {self.activation_clamp} outside [-128, 127]")
            object.__setattr__(self, "activation_clamp", (lo, hi))
        object.__setattr__(self, "output_zero_point", int(self.output_zero_point))


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    op: object
    inputs: tuple
    output: TensorSpec
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    weight_qparams: Optional[QuantParams] = None
    requant: Optional[RequantSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        for name in ("weight", "bias"):
            arr = getattr(self, name)
            if arr is not None and (not isinstance(arr, np.ndarray) or arr.flags.writeable):
                arr = np.array(arr, copy=True)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def kind(self) -> str:
        return self.op.kind

    def with_(self, **changes) -> "Node":
        return replace(self, **changes)


# --------------------------------------------------------------------------- #
# Shape rules
# --------------------------------------------------------------------------- #

def conv_out_dim(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def same_pad(size: int, k: int, stride: int, padding: str) -> tuple:
    """(before, after) padding for one spatial axis."""
    if padding == "valid":
        return 0, 0
    out = conv_out_dim(size, k, stride, padding)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def infer_shape(node_id: str, op, in_specs: Sequence[TensorSpec]) -> tuple:
    """Output shape of ``op`` applied to ``in_specs``; raises ModelError on violations."""
    kind = op.kind

    def need(n):
        if len(in_specs) != n:
            raise ModelError(f"{kind} expects {n} input(s), got {len(in_specs)}", node_id, "inputs")

    if kind == "Conv2D":
        need(1)
        _, h, w, _ = in_specs[0].shape
        oh = conv_out_dim(h, op.kh, op.stride, op.padding)
        ow = conv_out_dim(w, op.kw, op.stride, op.padding)
        if oh < 1 or ow < 1:
            raise ModelError(f"kernel larger than input {h}x{w}", node_id, "op")
        return (1, oh, ow, op.cout)
    if kind == "MaxPool2D":
        need(1)
        _, h, w, c = in_specs[0].shape
        oh = conv_out_dim(h, op.kernel, op.stride, op.padding)
        ow = conv_out_dim(w, op.kernel, op.stride, op.padding)
        if oh < 1 or ow < 1:
            raise ModelError(f"pool window larger than input {h}x{w}", node_id, "op")
        return (1, oh, ow, c)
    if kind == "ResizeNearest":
        need(1)
        _, h, w, c = in_specs[0].shape
        return (1, h * op.factor, w * op.factor, c)
    if kind == "Concat":
        if len(in_specs) < 1:
            raise ModelError("Concat needs at least one input", node_id, "inputs")
        hw = {s.shape[1:3] for s in in_specs}
        if len(hw) != 1:
            raise ModelError(f"Concat spatial mismatch {sorted(hw)}", node_id, "inputs")
        h, w = hw.pop()
        return (1, h, w, sum(s.c for s in in_specs))
    if kind == "Add":
        need(2)
        if in_specs[0].shape != in_specs[1].shape:
            raise ModelError(f"Add shape mismatch {in_specs[0].shape} vs {in_specs[1].shape}", node_id, "inputs")
        return in_specs[0].shape
    if kind in ("Quantize", "Dequantize", "Sigmoid"):
        need(1)
        return in_specs[0].shape
    if kind == "BoxDecode":
        need(1)
        _, h, w, c = in_specs[0].shape
        if c != op.num_anchors * op.row_width:
            raise ModelError(
                f"BoxDecode expects {op.num_anchors}*{op.row_width} channels, got {c}", node_id, "inputs")
        return (1, 1, h * w * op.num_anchors, op.row_width)
    if kind == "NMS":
        if not in_specs:
            raise ModelError("NMS needs at least one input", node_id, "inputs")
        widths = {s.c for s in in_specs}
        if len(widths) != 1 or any(s.h != 1 for s in in_specs):
            raise ModelError("NMS inputs must be decoded box tables of equal width", node_id, "inputs")
        return (1, 1, op.max_det, 6)
    raise ModelError(f"unknown operator {kind!r}", node_id, "op")


def expected_param_shapes(node: Node, in_specs: Sequence[TensorSpec]):
    """(weight shape, bias shape) a node must carry, or (None, None)."""
    op = node.op
    if op.kind == "Conv2D":
        cin = in_specs[0].c
        return (op.kh, op.kw, cin, op.cout), ((op.cout,) if op.has_bias else None)
    if op.kind == "Add" and node.output.dtype == DType.i8:
        return None, (node.output.c,)
    return None, None


# --------------------------------------------------------------------------- #
# Graph
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class Graph:
    inputs: tuple              # ((tensor id, TensorSpec), ...)
    nodes: tuple               # topologically ordered Node tuple
    outputs: tuple             # tensor ids
    name: str = "model"
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple((str(k), v) for k, v in self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "nodes", _toposort(self.inputs, tuple(self.nodes)))
        object.__setattr__(self, "metadata", dict(self.metadata))
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})
        self.validate()

    # -- lookup ----------------------------------------------------------- #
    @property
    def input_specs(self) -> dict:
        return dict(self.inputs)

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    @property
    def node_map(self) -> dict:
        return dict(self._by_id)

    def spec(self, tensor_id: str) -> TensorSpec:
        if tensor_id in self._by_id:
            return self._by_id[tensor_id].output
        return self.input_specs[tensor_id]

    def tensor_specs(self) -> dict:
        out = dict(self.inputs)
        out.update((n.id, n.output) for n in self.nodes)
        return out

    def consumers(self) -> dict:
        """tensor id -> list of (node id, input position)."""
        cons = {tid: [] for tid in self.tensor_specs()}
        for n in self.nodes:
            for pos, t in enumerate(n.inputs):
                cons[t].append((n.id, pos))
        return cons

    def nodes_of(self, *kinds) -> list:
        return [n for n in self.nodes if n.kind in kinds]

    def replace_nodes(self, nodes: Iterable[Node], **changes) -> "Graph":
        return replace(self, nodes=tuple(nodes), **changes)

    # -- validation -------------------------------------------------------- #
    def validate(self) -> None:
        specs = dict(self.inputs)
        if len(specs) != len(self.inputs):
            raise ModelError("duplicate graph input ids")
        for n in self.nodes:
            if n.id in specs:
                raise ModelError("tensor id produced more than once", n.id, "id")
            in_specs = []
            for t in n.inputs:
                if t not in specs:
                    raise ModelError(f"dangling reference to {t!r}", n.id, "inputs")
                in_specs.append(specs[t])
            shape = infer_shape(n.id, n.op, in_specs)
            if shape != n.output.shape:
                raise ModelError(f"output shape {n.output.shape} violates shape rule {shape}", n.id, "output")
            _check_dtypes(n, in_specs)
            wshape, bshape = expected_param_shapes(n, in_specs)
            if wshape is not None and (n.weight is None or n.weight.shape != wshape):
                got = None if n.weight is None else n.weight.shape
                raise ModelError(f"weight shape {got} != expected {wshape}", n.id, "weight")
            if wshape is None and n.weight is not None:
                raise ModelError("operator takes no weights", n.id, "weight")
            if bshape is not None and (n.bias is None or n.bias.shape != bshape):
                got = None if n.bias is None else n.bias.shape
                raise ModelError(f"bias shape {got} != expected {bshape}", n.id, "bias")
            specs[n.id] = n.output
        for t in self.outputs:
            if t not in specs:
                raise ModelError(f"graph output {t!r} is not produced")


def _check_dtypes(n: Node, in_specs) -> None:
    out = n.output.dtype
    kind = n.kind
    if kind == "Quantize":
        if in_specs[0].dtype != DType.f32 or out != DType.i8:
            raise ModelError("Quantize maps f32 -> i8", n.id, "output")
        return
    if kind == "Dequantize":
        if in_specs[0].dtype != DType.i8 or out != DType.f32:
            raise ModelError("Dequantize maps i8 -> f32", n.id, "output")
        return
    if kind in POSTPROCESS and out != DType.f32:
        raise ModelError(f"{kind} must stay in f32", n.id, "output")
    for s in in_specs:
        if s.dtype != out:
            raise ModelError(f"mixed dtypes {s.dtype.value} -> {out.value} without Quantize/Dequantize",
                             n.id, "inputs")
    if n.kind == "Conv2D":
        if out == DType.i8:
            if n.weight is not None and n.weight.dtype != np.int8:
                raise ModelError("quantized Conv2D weights must be int8", n.id, "weight")
            if n.bias is not None and n.bias.dtype != np.int32:
                raise ModelError("quantized Conv2D bias must be int32", n.id, "bias")
            if n.requant is None:
                raise ModelError("quantized Conv2D requires a RequantSpec", n.id, "requant")
        elif n.weight is not None and n.weight.dtype != np.float32:
            raise ModelError("float Conv2D weights must be float32", n.id, "weight")


def _toposort(inputs, nodes):
    """Stable Kahn sort; raises on cycles and duplicate producers."""
    produced = {}
    for n in nodes:
        if n.id in produced:
            raise ModelError("tensor id produced more than once", n.id, "id")
        produced[n.id] = n
    available = {k for k, _ in inputs}
    order, placed = [], set()
    pending = list(nodes)
    while pending:
        progress = []
        rest = []
        for n in pending:
            if all(t in available or t in placed for t in n.inputs):
                progress.append(n)
                placed.add(n.id)
            else:
                rest.append(n)
        if not progress:
            missing = [t for n in rest for t in n.inputs if t not in produced and t not in available]
            if missing:
                raise ModelError(f"dangling reference to {missing[0]!r}", rest[0].id, "inputs")
            raise ModelError("graph contains a cycle", rest[0].id, "inputs")
        order.extend(progress)
        pending = rest
    return tuple(order)


def propagate_shapes(nodes: Sequence[Node], input_specs: Mapping[str, TensorSpec]) -> list:
    """Re-derive every node's output shape from the given input specs (dtype/qparams kept)."""
    specs = dict(input_specs)
    out = []
    for n in _toposort(tuple(input_specs.items()), tuple(nodes)):
        shape = infer_shape(n.id, n.op, [specs[t] for t in n.inputs])
        spec = replace(n.output, shape=shape)
        n = n.with_(output=spec)
        specs[n.id] = spec
        out.append(n)
    return out


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality including parameter values."""
    if a.inputs != b.inputs or a.outputs != b.outputs or len(a.nodes) != len(b.nodes):
        return False
    for x, y in zip(a.nodes, b.nodes):
        if (x.id, x.op, x.inputs, x.output, x.weight_qparams, x.requant) != \
                (y.id, y.op, y.inputs, y.output, y.weight_qparams, y.requant):
            return False
        for p, q in ((x.weight, y.weight), (x.bias, y.bias)):
            if (p is None) != (q is None):
                return False
            if p is not None and (p.dtype != q.dtype or not np.array_equal(p, q)):
                return False
    return True
