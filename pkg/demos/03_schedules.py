"""How the schedule of a single convolution changes its cycle count, but never its result.

Run:  python3 demos/03_schedules.py
"""
import numpy as np

from gemmflow.accel import BASELINE, OURS
from gemmflow.autotuner import simulate_cycles, tune_layer
from gemmflow.graph_ir import Conv2D, DType, Node, QuantParams, RequantSpec, TensorSpec, infer_shape
from gemmflow.scheduler import Schedule, conv_geometry, default_schedule

rng = np.random.default_rng(0)
spec = TensorSpec((1, 16, 16, 64), DType.i8, QuantParams(0.05, 3))
op = Conv2D(3, 3, 64, 1, "same", True, "none")
node = Node("conv", op, ("x",), TensorSpec(infer_shape("conv", op, [spec]), DType.i8, QuantParams(0.1, 0)),
            weight=rng.integers(-127, 128, (3, 3, 64, 64)).astype(np.int8),
            bias=rng.integers(-5000, 5000, 64).astype(np.int32),
            weight_qparams=QuantParams(0.01, 0), requant=RequantSpec(2 ** -9, 0, None))

gemm, _ = conv_geometry(node, spec)
print(f"im2col GEMM: m={gemm.m} k={gemm.k} n={gemm.n}, blocks on dim {OURS.dim}: {gemm.blocks(OURS.dim)}")

# %% The default fills the scratchpad along the reduction axis first.
d = default_schedule(node, OURS, spec)
print("default:", d.to_dict(), "->", simulate_cycles(node, spec, OURS, d), "cycles")

# %% Small tiles expose memory latency, and double buffering hides a large share of it.
for tiles in ((1, 1, 1), (2, 1, 2), (4, 2, 6)):
    plain = simulate_cycles(node, spec, OURS, Schedule(*tiles))
    db = simulate_cycles(node, spec, OURS, Schedule(*tiles, double_buffer=True))
    print(f"tiles {tiles}: {plain:6d} cycles, double-buffered {db:6d}")

# %% Tuning samples the space and falls back to the default unless something is strictly faster.
best, records = tune_layer(node, OURS, 32, in_spec=spec)
print(f"\ntuned over {len(records)} candidates: {best.cycles_default} -> {best.cycles_best} "
      f"({best.source}, {best.schedule.to_dict()})")

# %% The same layer on the smaller, slower baseline array.
print("baseline default:", simulate_cycles(node, spec, BASELINE, default_schedule(node, BASELINE, spec)), "cycles")
