"""Partitioning, end-to-end execution and reporting."""
from .engine import Program, accel_cycles, compare_placements, compile_accel, run_end_to_end
from .host import DEFAULT_CYCLES_PER_OP, HostModel, run_host
from .partition import Partition, partition
from .report import Detection, RunReport, detections_from_nms, detections_jsonl
