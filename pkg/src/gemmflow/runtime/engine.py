"""End-to-end execution: accelerator layers through modelled DRAM, then the host part."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..accel.sim import CycleReport, Simulator
from ..accel.isa import validate_stream
from ..errors import ScheduleError
from ..graph_ir import Graph, count_gop
from ..reference import as_inputs
from ..scheduler import Layout, conv_params, lower_node, read_buffer, spills, conv_geometry, \
    default_gemm_schedule, write_buffer
from .host import HostModel, run_host
from .partition import Partition, partition
from .report import RunReport, detections_from_nms

_LOWERABLE = ("Conv2D", "MaxPool2D", "ResizeNearest", "Concat", "Add", "Quantize")


@dataclass
class Program:
    """Per-layer instruction streams over one global DRAM layout."""
    graph: Graph
    layout: Layout
    layers: list          # (node id, InstructionStream)
    params: dict          # buffer name -> array

    def image(self, inputs: dict) -> np.ndarray:
        dram = np.zeros(self.layout.top, np.uint8)
        for name, arr in self.params.items():
            write_buffer(dram, self.layout.buffers[name], arr)
        for t, _ in self.graph.inputs:
            spec = self.graph.spec(t)
            write_buffer(dram, self.layout.buffers[t], np.asarray(inputs[t], spec.dtype.numpy))
        return dram

    def run(self, cfg, dram, functional=True):
        reports = []
        for node_id, stream in self.layers:
            sim = Simulator(cfg, dram, functional=functional)
            reports.append((node_id, sim.run(stream.instructions)))
        return reports

    def read(self, dram, tensor_id):
        return read_buffer(dram, self.layout.buffers[tensor_id]).reshape(self.graph.spec(tensor_id).shape)


def compile_accel(g: Graph, cfg, schedules=None) -> Program:
    """Lower every node of an all-int8 (plus Quantize) graph to streams over a shared layout."""
    schedules = dict(schedules or {})
    convs = {n.id for n in g.nodes if n.kind == "Conv2D"}
    unknown = set(schedules) - convs
    if unknown:
        raise ScheduleError(f"schedules given for layers not in the accelerator part: {sorted(unknown)}")
    specs = g.tensor_specs()
    lay = Layout()
    for t, spec in g.inputs:
        lay.alloc(t, spec.nbytes, spec.shape, spec.dtype.value)
    for n in g.nodes:
        if n.kind not in _LOWERABLE:
            raise ScheduleError(f"{n.kind} node {n.id!r} cannot run on the accelerator")
        lay.alloc(n.id, n.output.nbytes, n.output.shape, n.output.dtype.value)
    params, scratch = {}, 0
    for n in g.nodes:
        if n.kind == "Conv2D":
            w, b = conv_params(n)
            lay.alloc(f"{n.id}.w", w.nbytes, w.shape)
            lay.alloc(f"{n.id}.b", b.nbytes, b.shape, "i32")
            params[f"{n.id}.w"], params[f"{n.id}.b"] = w, b
            gemm, _ = conv_geometry(n, specs[n.inputs[0]])
            sched = schedules.get(n.id) or default_gemm_schedule(gemm, cfg)
            schedules[n.id] = sched
            if spills(gemm, cfg, sched):
                scratch = max(scratch, 4 * gemm.m * gemm.n)
        elif n.kind == "Add":
            lay.alloc(f"{n.id}.b", 4 * n.output.c, (n.output.c,), "i32")
            params[f"{n.id}.b"] = np.asarray(n.bias, "<i4")
    scratch_addr = lay.alloc("scratch", scratch, (scratch // 4,), "i32") if scratch else None
    layers = []
    for n in g.nodes:
        addr = lambda t: lay.buffers[t].addr      # noqa: E731
        if n.kind == "Conv2D":
            addrs = {"x": addr(n.inputs[0]), "w": addr(f"{n.id}.w"), "b": addr(f"{n.id}.b"),
                     "y": addr(n.id), "scratch": scratch_addr}
        else:
            addrs = {f"x{i}": addr(t) for i, t in enumerate(n.inputs)}
            addrs["y"] = addr(n.id)
            if n.kind == "Add":
                addrs["b"] = addr(f"{n.id}.b")
        stream = lower_node(n, cfg, [specs[t] for t in n.inputs], schedules.get(n.id), addrs)
        validate_stream(cfg, stream)
        layers.append((n.id, stream))
    return Program(g, lay, layers, params)


def _sum_reports(reports) -> CycleReport:
    total = CycleReport()
    for _, r in reports:
        total = total + r
    return total


def accel_cycles(g: Graph, cfg, schedules=None) -> CycleReport:
    """Timing-only cycle count of an accelerator subgraph."""
    prog = compile_accel(g, cfg, schedules)
    return _sum_reports(prog.run(cfg, np.zeros(prog.layout.top, np.uint8), functional=False))


def run_end_to_end(p: Partition, cfg, schedules=None, inputs=None, power_w=1.0, host_model=None,
                   transfer_ms_per_byte=0.0, return_outputs=False):
    """Run the accelerator part layer by layer, hand boundary tensors to the host part.

    Returns ``(detections, report)`` (plus the graph outputs when ``return_outputs``).
    """
    host_model = host_model or HostModel()
    src = p.source
    inputs = as_inputs(src, inputs)
    prog = compile_accel(p.accel, cfg, schedules)
    dram = prog.image({t: inputs[t] for t, _ in p.accel.inputs})
    reports = prog.run(cfg, dram, functional=True)
    values = dict(inputs)
    for t in p.accel.outputs:
        values[t] = prog.read(dram, t)
    host_in = {t: values[t] for t, _ in p.host.inputs}
    values.update(run_host(p.host, host_in) if p.host.nodes else {})
    outputs = {t: values[t] for t in src.outputs}
    total = _sum_reports(reports)
    report = RunReport.build(count_gop(src).gop, total.total, cfg.freq_mhz, host_model.ms(p.host),
                             transfer_ms_per_byte * p.boundary_bytes, power_w,
                             [(nid, r.total) for nid, r in reports])
    dets = []
    nms = [n for n in src.nodes if n.kind == "NMS" and n.id in outputs]
    if nms:
        dets = detections_from_nms(outputs[nms[0].id])
    if return_outputs:
        return dets, report, outputs
    return dets, report


def compare_placements(g: Graph, cfg, schedules=None, host_model=None, transfer_ms_per_byte=0.0) -> list:
    """Total latency with everything on the host, everything on the accelerator, and split."""
    host_model = host_model or HostModel()
    p = partition(g)
    cycles = accel_cycles(p.accel, cfg, schedules).total if p.accel.nodes else 0
    accel_ms = cycles / (cfg.freq_mhz * 1e3)
    acc_hz = cfg.freq_mhz * 1e6
    rows = [
        {"placement": "only-accel", "accel_ms": accel_ms, "host_ms": host_model.ms(p.host, acc_hz),
         "transfer_ms": 0.0},
        {"placement": "only-host", "accel_ms": 0.0, "host_ms": host_model.ms(g), "transfer_ms": 0.0},
        {"placement": "mixed", "accel_ms": accel_ms, "host_ms": host_model.ms(p.host),
         "transfer_ms": transfer_ms_per_byte * p.boundary_bytes},
    ]
    for r in rows:
        r["total_ms"] = r["accel_ms"] + r["host_ms"] + r["transfer_ms"]
    return rows
