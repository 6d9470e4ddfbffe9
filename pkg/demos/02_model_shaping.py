"""Shrinking a detector before it ever reaches the accelerator: input size, then pruning.

Run:  python3 demos/02_model_shaping.py
"""
from gemmflow.graph_ir import count_gop, param_count, rescale_input
from gemmflow.models import yolov7_tiny
from gemmflow.pruner import build_connectivity, bundled_plan, run_plan

g = yolov7_tiny(640)
base = count_gop(g).gop

# %% Work grows with pixel count, so 480 costs (480/640)^2 of 640.
for hw in (640, 480, 320):
    gop = count_gop(rescale_input(g, (hw, hw))).gop
    print(f"{hw}x{hw}: {gop:6.3f} GOP  ({gop / base:.4f} of 640)")

g = rescale_input(g, (480, 480))

# %% Convolutions joined by Add must lose the same channels, and convs feeding the heads keep theirs.
groups = build_connectivity(g)
tied = [grp for grp in groups.values() if len(grp.members) > 1]
pinned = [gid for gid, grp in groups.items() if grp.pinned]
print(f"\n{len(groups)} prunable groups, {len(tied)} tied by Add, pinned: {pinned}")

# %% The bundled plans apply small uniform steps until the target sparsity is reached.
for name in ("yolov7_tiny_40", "yolov7_tiny_88"):
    pruned, stats = run_plan(g, bundled_plan(name))
    s = stats[-1]
    print(f"{name}: params {param_count(g)} -> {param_count(pruned)} "
          f"(sparsity {s.sparsity:.3f}), GOP {s.gop_before:.3f} -> {s.gop_after:.3f} "
          f"(reduction {s.gop_reduction:.3f})")
