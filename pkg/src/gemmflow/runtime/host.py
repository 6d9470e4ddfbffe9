"""Host-side execution and its latency proxy."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..graph_ir import Graph, node_ops
from ..reference import run_graph

# cycles per counted op on a single in-order core; Quantize/Dequantize are charged per element
DEFAULT_CYCLES_PER_OP = {
    "Conv2D": 1.0, "MaxPool2D": 2.0, "ResizeNearest": 1.0, "Concat": 1.0, "Add": 2.0,
    "Quantize": 4.0, "Dequantize": 3.0, "Sigmoid": 24.0, "BoxDecode": 6.0, "NMS": 40.0,
}


@dataclass(frozen=True)
class HostModel:
    """Scalar-CPU latency stand-in: ops x cycles-per-op / clock."""
    freq_ghz: float = 1.2
    cycles_per_op: dict = field(default_factory=lambda: dict(DEFAULT_CYCLES_PER_OP))

    def node_cycles(self, kind, op, in_specs, out) -> float:
        work = node_ops(kind, op, in_specs, out)
        if kind in ("Quantize", "Dequantize"):
            work = out.size
        return work * self.cycles_per_op[kind]

    def graph_cycles(self, g: Graph) -> float:
        specs = g.tensor_specs()
        return sum(self.node_cycles(n.kind, n.op, [specs[t] for t in n.inputs], n.output) for n in g.nodes)

    def ms(self, g: Graph, freq_hz: float = None) -> float:
        hz = freq_hz if freq_hz is not None else self.freq_ghz * 1e9
        return self.graph_cycles(g) / hz * 1e3

    def to_dict(self) -> dict:
        return {"freq_ghz": self.freq_ghz, "cycles_per_op": dict(sorted(self.cycles_per_op.items()))}


def run_host(g: Graph, inputs) -> dict:
    """Execute a float subgraph (dequantization, sigmoid, decode, NMS) on the host."""
    return run_graph(g, inputs)
