"""Cycle-approximate model of a weight-stationary systolic-array accelerator."""
from .config import BASELINE, FEATURES, OURS, PRESETS, AcceleratorConfig, feature_flags, get_config
from .isa import (ACC, SPAD, Buffer, Compute, ConfigEx, ConfigLd, ConfigSt, Fence, Im2col,
                  InstructionStream, LocalAddr, Mvin, Mvout, Pool, Preload, acc, format_instruction,
                  parse_instruction, required_features, spad, validate_stream)
from .macro import execute_macro
from .sim import CycleReport, Simulator, execute_stream, stream_footprint
