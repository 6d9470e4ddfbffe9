"""Graph-level transforms: activation replacement, input rescaling, op counting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

from ..errors import ModelError
from .core import POSTPROCESS, Graph, TensorSpec, propagate_shapes


def replace_activations(g: Graph) -> Graph:
    """Swap every LeakyReLU-activated Conv2D for ReLU6."""
    nodes = []
    for n in g.nodes:
        if n.kind == "Conv2D" and n.op.activation == "leaky_relu":
            n = n.with_(op=replace(n.op, activation="relu6"))
        nodes.append(n)
    return g.replace_nodes(nodes)


def downsample_factor(g: Graph) -> int:
    """Input-size multiple needed so every stride divides evenly.

    Tracks the cumulative stride product along each path (nearest-neighbour
    upsampling divides it back) and returns the lcm of all integer factors.
    """
    acc = {k: Fraction(1) for k, _ in g.inputs}
    for n in g.nodes:
        base = max((acc[t] for t in n.inputs), default=Fraction(1))
        if n.kind in ("Conv2D", "MaxPool2D"):
            base = base * n.op.stride
        elif n.kind == "ResizeNearest":
            base = base / n.op.factor
        acc[n.id] = base
    return math.lcm(*(int(f) for f in acc.values() if f.denominator == 1))


def rescale_input(g: Graph, new_hw) -> Graph:
    """Re-derive all spatial dims for a new (H, W) input resolution."""
    h, w = (int(v) for v in new_hw)
    factor = downsample_factor(g)
    if h % factor or w % factor:
        raise ModelError(f"input size {h}x{w} must be a multiple of {factor} (total downsampling)",
                         field="new_hw")
    inputs = tuple((k, replace(s, shape=(1, h, w, s.c))) for k, s in g.inputs)
    nodes = propagate_shapes(g.nodes, dict(inputs))
    return replace(g, inputs=inputs, nodes=tuple(nodes))


@dataclass(frozen=True)
class OpCount:
    total_ops: int
    main_ops: int
    post_ops: int
    per_node: dict

    @property
    def gop(self) -> float:
        return self.total_ops / 1e9

    @property
    def main_gop(self) -> float:
        return self.main_ops / 1e9

    @property
    def post_gop(self) -> float:
        return self.post_ops / 1e9


def node_ops(kind, op, in_specs, out: TensorSpec) -> int:
    """Integer op count of one node (a MAC counts as two ops)."""
    if kind == "Conv2D":
        return 2 * out.h * out.w * out.c * op.kh * op.kw * in_specs[0].c
    if kind in ("MaxPool2D", "ResizeNearest", "Concat", "Add", "Sigmoid"):
        return out.h * out.w * out.c
    if kind == "BoxDecode":
        return in_specs[0].size
    if kind == "NMS":
        return sum(s.h * s.w for s in in_specs)
    # dtype conversions are not counted
    return 0


def count_gop(g: Graph) -> OpCount:
    specs = g.tensor_specs()
    per_node, main, post = {}, 0, 0
    for n in g.nodes:
        ops = node_ops(n.kind, n.op, [specs[t] for t in n.inputs], n.output)
        per_node[n.id] = ops
        if n.kind in POSTPROCESS:
            post += ops
        else:
            main += ops
    return OpCount(main + post, main, post, per_node)


def param_count(g: Graph) -> int:
    """Number of learned parameters (Conv2D weights plus biases)."""
    total = 0
    for n in g.nodes_of("Conv2D"):
        total += n.weight.size if n.weight is not None else 0
        total += n.bias.size if n.bias is not None else 0
    return total

