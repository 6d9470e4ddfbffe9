"""Dtype-driven split of a quantized graph into accelerator and host parts."""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import PartitionError
from ..graph_ir import DType, Graph, graphs_equal


@dataclass(frozen=True)
class Partition:
    accel: Graph
    host: Graph
    boundary: tuple          # ((tensor id, bytes), ...) crossing accel -> host
    source: Graph

    @property
    def boundary_bytes(self) -> int:
        return sum(b for _, b in self.boundary)


def _subgraph(g: Graph, node_ids, name) -> Graph:
    specs = g.tensor_specs()
    inside = [n for n in g.nodes if n.id in node_ids]
    produced = {n.id for n in inside}
    needed = []
    for n in inside:
        for t in n.inputs:
            if t not in produced and t not in needed:
                needed.append(t)
    cons = g.consumers()
    outputs = []
    for n in inside:
        external = any(c not in produced for c, _ in cons[n.id])
        if external or n.id in g.outputs:
            outputs.append(n.id)
    for t in g.outputs:
        if t in needed and t not in outputs:
            outputs.append(t)
    return Graph(tuple((t, specs[t]) for t in needed), tuple(inside), tuple(outputs),
                 name=f"{g.name}:{name}", metadata=dict(g.metadata))


def partition(g: Graph) -> Partition:
    """i8-producing nodes go to the accelerator, f32-producing ones (incl. Dequantize) to the host."""
    specs = g.tensor_specs()
    bad = []
    for n in g.nodes:
        if n.kind in ("Quantize", "Dequantize"):
            continue
        for t in n.inputs:
            if specs[t].dtype != n.output.dtype:
                bad.append(n.id)
                break
    if bad:
        raise PartitionError(f"dtype frontier is not a cut at nodes {bad}")
    accel_ids = {n.id for n in g.nodes if n.output.dtype == DType.i8}
    host_ids = {n.id for n in g.nodes if n.id not in accel_ids}
    # two sequential phases (accelerator, then host) need no host -> accel edges
    back = [n.id for n in g.nodes if n.id in accel_ids and any(t in host_ids for t in n.inputs)]
    if back:
        raise PartitionError(f"nodes {back} consume host results; the split would need a round trip")
    boundary = []
    for n in g.nodes:
        if n.id in host_ids:
            for t in n.inputs:
                if t in accel_ids and t not in (b for b, _ in boundary):
                    boundary.append((t, specs[t].nbytes))
    return Partition(_subgraph(g, accel_ids, "accel"), _subgraph(g, host_ids, "host"),
                     tuple(boundary), g)


def same_partition(a: Graph, b: Graph) -> bool:
    return graphs_equal(a, b)
