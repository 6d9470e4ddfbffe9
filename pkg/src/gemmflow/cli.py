"""Command-line front end: ``gemmflow analyze``, ``gemmflow pipeline``, ``gemmflow export``.

Exit codes: 0 ok, 2 validation, 3 simulation (or a failed audit), 4 io.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, models
from .accel import get_config
from .autotuner import tune_graph, write_records
from .errors import GemmflowError, ModelError, SimulationError
from .graph_ir import count_gop, load_model, rescale_input, replace_activations, save_model
from .pruner import PruningPlan, bundled_plan, run_plan, stats_csv
from .quantizer import calibrate, frontier_is_cut, quantize_graph
from .reference import run_graph
from .runtime import HostModel, partition, run_end_to_end
from .scheduler import is_legal

log = logging.getLogger("gemmflow")

EXIT_OK, EXIT_VALIDATION, EXIT_SIMULATION, EXIT_IO = 0, 2, 3, 4

BUNDLED = {
    "toy_detector": models.toy_detector,
    "conv_only": models.conv_only,
    "yolov7_tiny": models.yolov7_tiny,
    "synthetic_58conv": models.synthetic_58conv,
}

DEFAULTS = {
    "model": "toy_detector", "weights": None, "accel": "ours", "budget": 8, "seed": 0, "power_w": 1.0,
    "jobs": 1, "skip_prune": False, "skip_tune": False, "out_dir": "gemmflow_out", "emit": "json",
    "plan": None, "input_size": None, "calib_samples": 4, "num_inputs": 1,
}
# execution knobs that must not change any artifact byte
_NOT_HASHED = ("jobs", "out_dir")
DEFAULT_PLAN = PruningPlan((("*", 0.25),), "uniform-25")


class AuditError(SimulationError):
    """An end-of-pipeline invariant did not hold."""


class StageError(Exception):
    def __init__(self, stage, cause):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, SimulationError):
        return EXIT_SIMULATION
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (GemmflowError, ValueError, KeyError, TypeError)):
        return EXIT_VALIDATION
    return 1


# --------------------------------------------------------------------------- #
# config
# --------------------------------------------------------------------------- #

@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    model: str
    weights: str | None
    accel: object
    budget: int
    seed: int
    power_w: float
    jobs: int
    skip_prune: bool
    skip_tune: bool
    out_dir: str
    emit: str
    plan: str | None
    input_size: int | None
    calib_samples: int
    num_inputs: int

    def __post_init__(self):
        if self.power_w <= 0:
            raise ValueError("power_w must be positive")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.emit not in ("json", "csv"):
            raise ValueError(f"emit must be json or csv, not {self.emit!r}")
        if self.calib_samples < 1 or self.num_inputs < 1:
            raise ValueError("calib_samples and num_inputs must be at least 1")
        if self.model not in BUNDLED and not Path(self.model).exists():
            raise FileNotFoundError(f"model {self.model!r} is neither a bundled model nor a file")
        if self.weights is not None and not Path(self.weights).exists():
            raise FileNotFoundError(f"weights file {self.weights!r} not found")

    @classmethod
    def resolve(cls, file_cfg: dict, overrides: dict) -> "PipelineConfig":
        merged = dict(DEFAULTS)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        merged.update(file_cfg)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)

    def accel_config(self):
        return get_config(self.accel)

    def hashed_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in _NOT_HASHED}
        d["accel"] = self.accel_config().to_dict()
        for key in ("model", "weights", "plan"):
            p = d.get(key)
            if p is not None and Path(p).is_file():
                d[key] = {"file": Path(p).name, "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
        return d

    def config_hash(self) -> str:
        body = json.dumps({"tool": __version__, **self.hashed_dict()}, sort_keys=True, default=str)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def load_graph(model: str, weights=None):
    if model in BUNDLED:
        if weights is not None:
            raise ValueError("--weights only applies to a model file, not a bundled model")
        return BUNDLED[model]()
    return load_model(model, weights)


def resolve_plan(plan):
    if plan is None:
        return DEFAULT_PLAN
    if Path(plan).is_file():
        return PruningPlan.load(plan)
    return bundled_plan(plan)


# --------------------------------------------------------------------------- #
# artifacts
# --------------------------------------------------------------------------- #

class ArtifactWriter:
    """Writes files under ``root`` and remembers them for the manifest or .partial renaming."""

    def __init__(self, root: Path, stamp: dict):
        self.root, self.stamp, self.files = Path(root), stamp, []
        self.root.mkdir(parents=True, exist_ok=True)

    def _track(self, path: Path):
        if path not in self.files:
            self.files.append(path)

    def text(self, name, content: str):
        path = self.root / name
        path.write_text(content)
        self._track(path)
        return path

    def json(self, name, obj: dict):
        return self.text(name, json.dumps({**self.stamp, **obj}, indent=1, sort_keys=True) + "\n")

    def csv(self, name, body: str):
        head = "".join(f"# {k}: {v}\n" for k, v in sorted(self.stamp.items()))
        return self.text(name, head + body)

    def model(self, name, graph):
        g = dataclasses.replace(graph, metadata={**graph.metadata, **self.stamp})
        path = save_model(g, self.root / name)
        self._track(path)
        self._track(path.with_suffix(".bin"))
        return path

    def manifest(self):
        entries = [{"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                   for p in sorted(self.files)]
        return self.json("manifest.json", {"format": "gemmflow-artifacts", "artifacts": entries})

    def mark_partial(self):
        for p in self.files:
            if p.exists():
                p.replace(p.with_name(p.name + ".partial"))


def _csv_rows(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------- #
# analyze
# --------------------------------------------------------------------------- #

def analyze_input_size(graph, sizes) -> list:
    """One row per size: GOP of the rescaled graph, or the reason it cannot be rescaled."""
    rows, base = [], None
    for s in sizes:
        try:
            oc = count_gop(rescale_input(graph, (s, s)))
        except ModelError as exc:
            rows.append({"size": s, "gop": None, "main_gop": None, "ratio": None, "error": str(exc)})
            continue
        base = base if base is not None else oc.gop
        rows.append({"size": s, "gop": oc.gop, "main_gop": oc.main_gop, "ratio": oc.gop / base, "error": ""})
    return rows


def cmd_analyze(args) -> int:
    graph = load_graph(args.model, args.weights)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows = analyze_input_size(graph, sizes)
    cols = ("size", "gop", "main_gop", "ratio", "error")
    if args.emit == "csv":
        out = _csv_rows(cols, [["" if r[c] is None else r[c] for c in cols] for r in rows])
    else:
        out = json.dumps({"format": "gemmflow-input-size", "version": 1, "tool_version": __version__,
                          "model": graph.name, "rows": rows}, indent=1) + "\n"
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        Path(args.out_dir, f"input_size.{args.emit}").write_text(out)
    else:
        sys.stdout.write(out)
    return EXIT_VALIDATION if any(r["error"] for r in rows) and len(rows) == 1 else EXIT_OK


def cmd_export(args) -> int:
    graph = load_graph(args.model, args.weights)
    if args.input_size:
        graph = rescale_input(graph, (args.input_size, args.input_size))
    path = save_model(graph, args.out)
    print(path)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# pipeline
# --------------------------------------------------------------------------- #

def _images(spec, n, rng):
    return [rng.random(spec.shape, dtype=np.float32) for _ in range(n)]


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage, writing artifacts to ``cfg.out_dir``; returns the audit table.

    Raises StageError naming the failing stage; written files then carry a .partial suffix.
    """
    chash = cfg.config_hash()
    w = ArtifactWriter(Path(cfg.out_dir), {"tool_version": __version__, "config_hash": chash})
    stage = "config"
    try:
        accel = cfg.accel_config()
        rng = np.random.default_rng(cfg.seed)
        w.json("config.json", {"format": "gemmflow-pipeline-config", "config": cfg.hashed_dict()})

        stage = "load"
        g = load_graph(cfg.model, cfg.weights)

        stage = "transform"
        g = replace_activations(g)
        if cfg.input_size:
            g = rescale_input(g, (cfg.input_size, cfg.input_size))

        if not cfg.skip_prune:
            stage = "prune"
            plan = resolve_plan(cfg.plan)
            g, stats = run_plan(g, plan)
            w.csv("pruning_stats.csv", stats_csv(stats))
        w.model("model_f32.json", g)

        stage = "calibrate"
        (in_id, in_spec), = g.inputs
        stats = calibrate(g, _images(in_spec, cfg.calib_samples, rng))
        w.json("calibration.json", {"format": "gemmflow-calibration", "ranges": json.loads(stats.to_json())})

        stage = "quantize"
        q = quantize_graph(g, stats)
        w.model("model_int8.json", q)

        stage = "partition"
        p = partition(q)
        w.json("partition.json", {"format": "gemmflow-partition",
                                  "accel": [n.id for n in p.accel.nodes], "host": [n.id for n in p.host.nodes],
                                  "boundary": [list(b) for b in p.boundary]})

        schedules, tuned = {}, None
        if not cfg.skip_tune:
            stage = "tune"
            tuned = tune_graph(p.accel, accel, cfg.budget, cfg.seed, jobs=cfg.jobs)
            schedules = tuned.schedules
            write_records(w.root / "tuning_records.jsonl", tuned.records, header=w.stamp)
            w._track(w.root / "tuning_records.jsonl")
            summary = tuned.summary()
            w.json("schedules.json", {"format": "gemmflow-schedules", **summary})

        stage = "run"
        host = HostModel()
        det_lines, audits_match, report = [], True, None
        for i, x in enumerate(_images(in_spec, cfg.num_inputs, rng)):
            dets, report, outs = run_end_to_end(p, accel, schedules, {in_id: x}, cfg.power_w, host,
                                                return_outputs=True)
            ref = run_graph(q, {in_id: x})
            audits_match &= all(np.array_equal(outs[t], ref[t]) for t in q.outputs)
            det_lines += [json.dumps({"input": i, **d.to_dict()}, sort_keys=True) for d in dets]
        header = json.dumps({"format": "gemmflow-detections", "version": 1, **w.stamp}, sort_keys=True)
        w.text("detections.jsonl", "\n".join([header] + det_lines) + "\n")
        if cfg.emit == "csv":
            w.text("report.csv", report.to_csv(**w.stamp))
        else:
            w.text("report.json", report.to_json(**w.stamp))

        stage = "audit"
        audits = {
            "frontier_is_cut": bool(frontier_is_cut(q)),
            "partition_recomposes": bool(audits_match),
            "efficiency_identity": report.efficiency * report.power_w == report.gop_per_s,
            "tuning_never_worse": tuned is None or all(b.cycles_best <= b.cycles_default
                                                       for b in tuned.table.values()),
            "schedules_legal": all(is_legal(s, accel) for s in schedules.values()),
        }
        w.json("audit.json", {"format": "gemmflow-audit", "audits": audits})
        failed = [k for k, ok in audits.items() if not ok]
        if failed:
            raise AuditError(f"audits failed: {failed}")
        w.manifest()
        return audits
    except Exception as exc:
        w.mark_partial()
        raise StageError(stage, exc) from exc


def cmd_pipeline(args) -> int:
    file_cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {k: getattr(args, k) for k in DEFAULTS if hasattr(args, k)}
    cfg = PipelineConfig.resolve(file_cfg, overrides)
    audits = run_pipeline(cfg)
    log.info("pipeline finished: %s", ", ".join(f"{k}={v}" for k, v in audits.items()))
    print(Path(cfg.out_dir, "manifest.json"))
    return EXIT_OK


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gemmflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"gemmflow {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_flags(p):
        p.add_argument("--model", default=None, help="bundled model name or model manifest path")
        p.add_argument("--weights", default=None, help="weights blob overriding the manifest's")

    an = sub.add_parser("analyze", help="GOP per input resolution")
    model_flags(an)
    an.add_argument("--sizes", default="640,480,320")
    an.add_argument("--emit", choices=("json", "csv"), default="csv")
    an.add_argument("--out-dir", default=None)
    an.set_defaults(func=cmd_analyze, model_default="conv_only")

    ex = sub.add_parser("export", help="write a bundled model to a manifest + blob")
    model_flags(ex)
    ex.add_argument("--input-size", type=int, default=None)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export, model_default="toy_detector")

    pl = sub.add_parser("pipeline", help="prune, quantize, tune, compile and run end to end")
    model_flags(pl)
    pl.add_argument("--config", default=None, help="JSON pipeline config; flags win over it")
    pl.add_argument("--accel", default=None, help="ours | baseline | path to an accelerator JSON")
    pl.add_argument("--budget", type=int, default=None, help="candidate schedules per unique layer (8)")
    pl.add_argument("--seed", type=int, default=None, help="seeds calibration, inputs and tuning (0)")
    pl.add_argument("--power-w", type=float, default=None, help="board power for energy figures (1.0)")
    pl.add_argument("--jobs", type=int, default=None, help="tuning workers; output is identical for any value")
    pl.add_argument("--skip-prune", action="store_true", default=None, help="no pruning stage")
    pl.add_argument("--skip-tune", action="store_true", default=None, help="use default schedules")
    pl.add_argument("--out-dir", default=None, help="artifact directory (gemmflow_out)")
    pl.add_argument("--emit", choices=("json", "csv"), default=None, help="run report format (json)")
    pl.add_argument("--plan", default=None, help="pruning plan file or bundled plan name")
    pl.add_argument("--input-size", type=int, default=None)
    pl.add_argument("--calib-samples", type=int, default=None)
    pl.add_argument("--num-inputs", type=int, default=None)
    pl.set_defaults(func=cmd_pipeline, model_default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.model is None and args.model_default is not None:
        args.model = args.model_default
    try:
        return args.func(args)
    except StageError as exc:
        print(f"gemmflow: {exc}", file=sys.stderr)
        return exit_code(exc.cause)
    except Exception as exc:
        code = exit_code(exc)
        if code == 1:
            raise
        print(f"gemmflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
