"""Structured filter pruning over a connectivity graph of convolutions.

Each tensor's channel axis is traced as a list of segments, each naming
the convolution that produced those channels.  Concat places segments at
offsets, Add ties the channels of its two operands index-to-index, and
channel-preserving ops pass segments through.  Convolutions tied by Add
form one group and lose the same output channels; every consumer
convolution loses the matching input-channel slices.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import PruningError
from .graph_ir import DType, Graph, count_gop, param_count, propagate_shapes

PLAN_FORMAT = "gemmflow-pruning-plan"
_PASS_THROUGH = ("MaxPool2D", "ResizeNearest", "Quantize", "Dequantize")


@dataclass(frozen=True)
class Link:
    member: str        # producing conv
    consumer: str      # consuming conv
    offset: int        # where the member's channel ``start`` lands in the consumer's input
    start: int
    length: int


@dataclass(frozen=True)
class ConnectivityGroup:
    id: str
    channels: int
    members: tuple             # ((conv id, start, stop), ...)
    links: tuple = ()
    pinned: bool = False

    @property
    def consumers(self) -> set:
        return {(l.consumer, l.offset) for l in self.links}

    @property
    def member_ids(self) -> tuple:
        return tuple(m for m, _, _ in self.members)


@dataclass(frozen=True)
class PruningStats:
    params_before: int
    params_after: int
    gop_before: float
    gop_after: float

    @property
    def sparsity(self) -> float:
        return 1.0 - self.params_after / self.params_before if self.params_before else 0.0

    @property
    def gop_reduction(self) -> float:
        return 1.0 - self.gop_after / self.gop_before if self.gop_before else 0.0


@dataclass(frozen=True)
class PruningPlan:
    iterations: tuple = ()     # ((targets tuple, rate), ...)
    name: str = "plan"

    def __post_init__(self):
        its = tuple((tuple(t) if not isinstance(t, str) else t, float(r)) for t, r in self.iterations)
        for targets, rate in its:
            if not 0.0 < rate < 1.0:
                raise PruningError(f"pruning rate {rate} outside (0, 1)")
        object.__setattr__(self, "iterations", its)

    def to_json(self) -> str:
        its = [{"targets": t if isinstance(t, str) else list(t), "rate": repr(r)} for t, r in self.iterations]
        return json.dumps({"format": PLAN_FORMAT, "version": 1, "name": self.name, "iterations": its},
                          indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        d = json.loads(text)
        if d.get("format") != PLAN_FORMAT:
            raise PruningError("not a pruning plan")
        its = [(it["targets"], float(it["rate"])) for it in d["iterations"]]
        return cls(tuple(its), d.get("name", "plan"))

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_json(Path(path).read_text())


class _UF:
    def __init__(self, order):
        self.rank = {k: i for i, k in enumerate(order)}
        self.parent = {k: k for k in order}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # the root is the member earliest in topological order
            if self.rank[ra] > self.rank[rb]:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _layouts(g: Graph):
    """Channel segments per tensor, conv->consumer links, Add ties and pinned convs."""
    lay = {t: [(None, 0, s.c)] for t, s in g.inputs}
    links, ties, pinned = [], [], set()
    for n in g.nodes:
        ins = [lay[t] for t in n.inputs]
        if n.kind == "Conv2D":
            off = 0
            for src, start, length in ins[0]:
                if src is not None:
                    links.append(Link(src, n.id, off, start, length))
                off += length
            lay[n.id] = [(n.id, 0, n.op.cout)]
        elif n.kind in _PASS_THROUGH:
            lay[n.id] = ins[0]
        elif n.kind == "Concat":
            lay[n.id] = [seg for segs in ins for seg in segs]
        elif n.kind == "Add":
            a, b = ins
            if [s[2] for s in a] != [s[2] for s in b]:
                raise PruningError(f"unsupported topology: Add {n.id!r} ties differently segmented channels")
            for sa, sb in zip(a, b):
                if (sa[0] is None) != (sb[0] is None) or sa[1] != sb[1]:
                    raise PruningError(f"unsupported topology: Add {n.id!r} ties channels at "
                                       f"inconsistent offsets ({sa} vs {sb})")
                if sa[0] is not None:
                    full = [g.node(s[0]).op.cout == s[2] and s[1] == 0 for s in (sa, sb)]
                    if not all(full):
                        raise PruningError(f"unsupported topology: Add {n.id!r} ties a partial channel range")
                    ties.append((sa[0], sb[0]))
            lay[n.id] = a
        else:
            for segs in ins:
                pinned.update(s for s, _, _ in segs if s is not None)
            lay[n.id] = [(None, 0, n.output.c)]
    for t in g.outputs:
        pinned.update(s for s, _, _ in lay[t] if s is not None)
    return lay, links, ties, pinned


def build_connectivity(g: Graph) -> dict:
    """Group id -> ConnectivityGroup; the id is the group's first conv in topological order."""
    convs = [n.id for n in g.nodes if n.kind == "Conv2D"]
    _, links, ties, pinned = _layouts(g)
    uf = _UF(convs)
    for a, b in ties:
        uf.union(a, b)
    groups = {}
    for c in convs:
        groups.setdefault(uf.find(c), []).append(c)
    out = {}
    for gid, members in groups.items():
        cout = g.node(gid).op.cout
        mem = tuple((m, 0, cout) for m in members)
        glinks = tuple(l for l in links if l.member in members)
        out[gid] = ConnectivityGroup(gid, cout, mem, glinks, any(m in pinned for m in members))
    return out


def _resolve(groups: dict, targets) -> list:
    if targets == "*":
        return [gid for gid, grp in groups.items() if not grp.pinned]
    member_to_group = {m: gid for gid, grp in groups.items() for m in grp.member_ids}
    out = []
    for t in targets:
        if t not in member_to_group:
            raise PruningError(f"unknown pruning target {t!r}")
        gid = member_to_group[t]
        if groups[gid].pinned:
            raise PruningError(f"group {gid!r} feeds a fixed-format output and cannot be pruned")
        if gid not in out:
            out.append(gid)
    return out


def rank_channels(g: Graph, group: ConnectivityGroup) -> np.ndarray:
    """Channel indices sorted by summed filter L1 norm (ties: lower index first)."""
    score = np.zeros(group.channels, dtype=np.float64)
    for m in group.member_ids:
        w = np.asarray(g.node(m).weight, dtype=np.float64)
        score += np.abs(w).sum(axis=(0, 1, 2))
    return np.lexsort((np.arange(group.channels), score))


def stats_of(before: Graph, after: Graph) -> PruningStats:
    return PruningStats(param_count(before), param_count(after), count_gop(before).gop, count_gop(after).gop)


def prune_step(g: Graph, groups: dict, targets, rate: float):
    """Remove the ``floor(rate * C)`` weakest channels of every targeted group."""
    if not 0.0 < rate < 1.0:
        raise PruningError(f"pruning rate {rate} outside (0, 1)")
    if any(n.output.dtype != DType.f32 for n in g.nodes if n.kind == "Conv2D"):
        raise PruningError("prune the float graph before quantization")
    remove_out, remove_in = {}, {}
    for gid in _resolve(groups, targets):
        grp = groups[gid]
        k = int(np.floor(rate * grp.channels))
        if k >= grp.channels:
            raise PruningError(f"rate {rate} would remove all {grp.channels} channels of group {gid!r}")
        if k == 0:
            continue
        drop = np.sort(rank_channels(g, grp)[:k])
        for m in grp.member_ids:
            remove_out[m] = drop
        for l in grp.links:
            sel = drop[(drop >= l.start) & (drop < l.start + l.length)]
            remove_in.setdefault(l.consumer, set()).update(int(l.offset + c - l.start) for c in sel)
    nodes = []
    for n in g.nodes:
        if n.id in remove_out or n.id in remove_in:
            w, b, op = n.weight, n.bias, n.op
            if n.id in remove_in:
                keep_in = np.setdiff1d(np.arange(w.shape[2]), sorted(remove_in[n.id]))
                w = w[:, :, keep_in, :]
            if n.id in remove_out:
                keep = np.setdiff1d(np.arange(op.cout), remove_out[n.id])
                w = w[..., keep]
                b = None if b is None else b[keep]
                op = replace(op, cout=len(keep))
            n = n.with_(op=op, weight=np.ascontiguousarray(w), bias=None if b is None else np.ascontiguousarray(b))
        nodes.append(n)
    nodes = propagate_shapes(nodes, dict(g.inputs))
    out = Graph(g.inputs, tuple(nodes), g.outputs, name=g.name, metadata=dict(g.metadata))
    return out, stats_of(g, out)


def run_plan(g: Graph, plan: PruningPlan):
    """Apply a plan; returns (graph, [cumulative PruningStats per iteration])."""
    cur, stats = g, []
    for targets, rate in plan.iterations:
        cur, _ = prune_step(cur, build_connectivity(cur), targets, rate)
        stats.append(stats_of(g, cur))
    return cur, stats


def stats_csv(stats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "sparsity", "gop", "params", "gop_reduction"])
    for i, s in enumerate(stats, 1):
        w.writerow([i, f"{s.sparsity:.6f}", f"{s.gop_after:.6f}", s.params_after, f"{s.gop_reduction:.6f}"])
    return buf.getvalue()


def bundled_plan(name: str) -> PruningPlan:
    """Frozen plans shipped with the package (``yolov7_tiny_40`` or ``yolov7_tiny_88``)."""
    path = Path(__file__).parent / "data" / "plans" / f"{name}.json"
    if not path.exists():
        raise PruningError(f"no bundled plan named {name!r}")
    return PruningPlan.load(path)
