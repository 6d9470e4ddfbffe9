"""Per-layer schedule search with simulated cycles as the cost.

The search is exhaustive when the legal space fits the budget, otherwise
it evaluates a seeded prefix of a fixed permutation of the space (so a
larger budget always searches a superset) plus the default schedule.
A tuned schedule is only adopted when it strictly beats the default.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accel.sim import execute_stream
from .errors import GemmflowError
from .graph_ir import DType, Graph, Node, TensorSpec
from .scheduler import (LOOP_ORDERS, Gemm, Schedule, conv_geometry, default_gemm_schedule, legal_tiles,
                        lower_conv)

RECORD_FORMAT = "gemmflow-tuning-record"
RECORD_VERSION = 1


@dataclass(frozen=True)
class TuningRecord:
    fingerprint: str
    schedule: Schedule
    cycles: int | None
    timestamp: int                  # logical clock: position in the tuning log
    is_default: bool = False
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_json(self) -> str:
        return json.dumps({"format": RECORD_FORMAT, "version": RECORD_VERSION,
                           "fingerprint": self.fingerprint, "schedule": self.schedule.to_dict(),
                           "cycles": self.cycles, "timestamp": self.timestamp,
                           "is_default": self.is_default, "error": self.error}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TuningRecord":
        d = json.loads(line)
        if d.get("format") != RECORD_FORMAT:
            raise ValueError("not a tuning record")
        return cls(d["fingerprint"], Schedule.from_dict(d["schedule"]), d["cycles"], d["timestamp"],
                   d["is_default"], d["error"])


@dataclass(frozen=True)
class BestChoice:
    source: str                 # "tuned" | "default"
    schedule: Schedule
    cycles_default: int
    cycles_best: int

    @property
    def improvement(self) -> float:
        return 1.0 - self.cycles_best / self.cycles_default

    def to_dict(self) -> dict:
        return {"source": self.source, "schedule": self.schedule.to_dict(),
                "cycles_default": self.cycles_default, "cycles_best": self.cycles_best}


def fingerprint(node: Node, in_spec: TensorSpec, cfg) -> str:
    """Stable identity of a layer's tuning problem (values of weights do not affect timing)."""
    op = node.op
    body = {"op": node.kind, "attrs": {k: getattr(op, k) for k in ("kh", "kw", "cout", "stride", "padding")},
            "in": list(in_spec.shape), "out": list(node.output.shape), "cfg": cfg.config_hash()}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:20]


def full_space(gemm: Gemm, cfg) -> list:
    out = []
    for db in (False, True):
        for ti, tj, tk in legal_tiles(gemm, cfg, double_buffer=db):
            for order in LOOP_ORDERS:
                out.append(Schedule(ti, tj, tk, order, db))
    return sorted(out, key=Schedule.key)


def enumerate_space(node, cfg, budget: int, seed: int = 0, in_spec: TensorSpec = None) -> list:
    """Candidate schedules for a Conv2D node (or a ``Gemm``)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    gemm = node if isinstance(node, Gemm) else conv_geometry(node, in_spec)[0]
    space = full_space(gemm, cfg)
    default = default_gemm_schedule(gemm, cfg)
    if len(space) <= budget:
        return space
    rest = [s for s in space if s != default]
    key = json.dumps([gemm.m, gemm.k, gemm.n]).encode()
    rng = np.random.default_rng([seed, int(hashlib.sha256(key).hexdigest()[:8], 16)])
    order = rng.permutation(len(rest))
    picked = [rest[i] for i in order[:budget - 1]]
    return sorted(picked + [default], key=Schedule.key)


def simulate_cycles(node: Node, in_spec: TensorSpec, cfg, schedule: Schedule) -> int:
    stream = lower_conv(node, cfg, schedule, in_spec=in_spec)
    _, rep = execute_stream(cfg, stream, functional=False)
    return rep.total


def _evaluate(args):
    node, in_spec, cfg, schedules = args
    out = []
    for s in schedules:
        try:
            out.append((s, simulate_cycles(node, in_spec, cfg, s), None))
        except GemmflowError as exc:
            out.append((s, None, f"{type(exc).__name__}: {exc}"))
    return out


def _choose(results, default: Schedule) -> BestChoice:
    cycles_default = next(c for s, c, e in results if s == default)
    ok = [(c, s.key(), s) for s, c, e in results if e is None]
    c_best, _, s_best = min(ok)
    if c_best < cycles_default:
        return BestChoice("tuned", s_best, cycles_default, c_best)
    return BestChoice("default", default, cycles_default, cycles_default)


def tune_layer(node: Node, cfg, budget: int, seed: int = 0, *, in_spec: TensorSpec, clock: int = 0):
    """Search one conv layer; returns (BestChoice, [TuningRecord])."""
    gemm, _ = conv_geometry(node, in_spec)
    default = default_gemm_schedule(gemm, cfg)
    cands = enumerate_space(gemm, cfg, budget, seed)
    results = _evaluate((node, in_spec, cfg, cands))
    if not any(s == default for s, _, _ in results):
        results += _evaluate((node, in_spec, cfg, [default]))
    default_cycles = next((c for s, c, e in results if s == default), None)
    if default_cycles is None:
        err = next(e for s, c, e in results if s == default)
        raise GemmflowError(f"default schedule failed to simulate: {err}")
    fp = fingerprint(node, in_spec, cfg)
    recs = [TuningRecord(fp, s, c, clock + n, s == default, e) for n, (s, c, e) in enumerate(results)]
    return _choose(results, default), recs


@dataclass
class TuningResult:
    table: dict                              # node id -> BestChoice
    records: list
    fingerprints: dict = field(default_factory=dict)   # node id -> fingerprint

    @property
    def schedules(self) -> dict:
        return {k: v.schedule for k, v in self.table.items()}

    def summary(self) -> dict:
        n = len(self.table)
        improved = [k for k, v in self.table.items() if v.cycles_best < v.cycles_default]
        red = [v.improvement for v in self.table.values()]
        return {
            "layers": n,
            "unique_layers": len(set(self.fingerprints.values())),
            "improved": len(improved),
            "fraction_improved": len(improved) / n if n else 0.0,
            "mean_cycle_reduction": float(np.mean(red)) if red else 0.0,
            "cycles_default": sum(v.cycles_default for v in self.table.values()),
            "cycles_best": sum(v.cycles_best for v in self.table.values()),
            "per_layer": [{"node": k, "delta": v.cycles_default - v.cycles_best, **v.to_dict()}
                          for k, v in self.table.items()],
        }


def tunable_layers(g: Graph):
    specs = g.tensor_specs()
    return [(n, specs[n.inputs[0]]) for n in g.nodes if n.kind == "Conv2D" and n.output.dtype == DType.i8]


def tune_graph(g: Graph, cfg, budget: int, seed: int = 0, jobs: int = 1) -> TuningResult:
    """Tune every quantized conv; identical layers (same fingerprint) are tuned once."""
    layers = tunable_layers(g)
    fps = {n.id: fingerprint(n, spec, cfg) for n, spec in layers}
    unique = {}
    for n, spec in layers:
        unique.setdefault(fps[n.id], (n, spec))
    work = []
    for fp, (n, spec) in unique.items():
        gemm, _ = conv_geometry(n, spec)
        cands = enumerate_space(gemm, cfg, budget, seed)
        default = default_gemm_schedule(gemm, cfg)
        if default not in cands:
            cands.append(default)
        work.append((fp, default, (n, spec, cfg, cands)))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_evaluate, [w[2] for w in work]))
    else:
        outs = [_evaluate(w[2]) for w in work]
    best, records, clock = {}, [], 0
    for (fp, default, _), results in zip(work, outs):
        best[fp] = _choose(results, default)
        for s, c, e in results:
            records.append(TuningRecord(fp, s, c, clock, s == default, e))
            clock += 1
    table = {n.id: best[fps[n.id]] for n, _ in layers}
    return TuningResult(table, records, fps)


LOG_FORMAT = "gemmflow-tuning-log"


def write_records(path, records, header=None) -> None:
    """JSONL log: one header line, then one record per line."""
    head = json.dumps({"format": LOG_FORMAT, "version": RECORD_VERSION, **(header or {})}, sort_keys=True)
    Path(path).write_text(head + "\n" + "".join(r.to_json() + "\n" for r in records))


def read_records(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and json.loads(line).get("format") != LOG_FORMAT:
            out.append(TuningRecord.from_json(line))
    return out


def replay(records) -> dict:
    """Rebuild fingerprint -> BestChoice from a record log without simulating."""
    by_fp = {}
    for r in records:
        by_fp.setdefault(r.fingerprint, []).append(r)
    out = {}
    for fp, recs in by_fp.items():
        default = next(r for r in recs if r.is_default)
        out[fp] = _choose([(r.schedule, r.cycles, r.error) for r in recs], default.schedule)
    return out


def replay_graph(g: Graph, cfg, records) -> TuningResult:
    best = replay(records)
    layers = tunable_layers(g)
    fps = {n.id: fingerprint(n, spec, cfg) for n, spec in layers}
    missing = [k for k, fp in fps.items() if fp not in best]
    if missing:
        raise GemmflowError(f"tuning log has no records for layers {missing}")
    return TuningResult({k: best[fp] for k, fp in fps.items()}, list(records), fps)
