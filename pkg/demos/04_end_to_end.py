"""The full flow on the bundled toy detector: quantize, split, tune, run, report.

Run:  python3 demos/04_end_to_end.py
The same flow with artifacts on disk is `gemmflow pipeline --out-dir out`.
"""
import numpy as np

from gemmflow.accel import BASELINE, OURS
from gemmflow.autotuner import tune_graph
from gemmflow.graph_ir import replace_activations
from gemmflow.models import toy_detector
from gemmflow.quantizer import calibrate, quantize_graph
from gemmflow.reference import run_graph
from gemmflow.runtime import accel_cycles, compare_placements, partition, run_end_to_end

rng = np.random.default_rng(0)
g = replace_activations(toy_detector(64))
(name, spec), = g.inputs
q = quantize_graph(g, calibrate(g, [rng.random(spec.shape, dtype=np.float32) for _ in range(4)]))

# %% Everything producing int8 goes to the accelerator; dequantize, sigmoid, decode and NMS stay on the host.
p = partition(q)
print("accelerator nodes:", len(p.accel.nodes), " host nodes:", [n.kind for n in p.host.nodes])
print("boundary:", p.boundary)

# %% Tune, then run one image through both halves.
tuned = tune_graph(p.accel, OURS, budget=8)
s = tuned.summary()
print(f"\ntuning: {s['improved']}/{s['layers']} layers faster, {s['cycles_default']} -> {s['cycles_best']} cycles")

x = rng.random(spec.shape, dtype=np.float32)
dets, report, outs = run_end_to_end(p, OURS, tuned.schedules, x, power_w=3.68, return_outputs=True)
ref = run_graph(q, x)
print("bit-identical to the unsplit graph:", all(np.array_equal(outs[t], ref[t]) for t in q.outputs))
print(f"{len(dets)} detections; top: {dets[0] if dets else None}")
print(f"report: {report.total_ms:.3f} ms, {report.gop_per_s:.2f} GOP/s, {report.efficiency:.2f} GOP/s/W")

# %% Placement comparison with the same host proxy model.
for row in compare_placements(q, OURS, tuned.schedules):
    print(f"  {row['placement']:>10}: {row['total_ms']:.3f} ms")

# %% A wider, faster array finishes the same layers in fewer cycles.
print("\ncycles ours:", accel_cycles(p.accel, OURS).total, " baseline:", accel_cycles(p.accel, BASELINE).total)
