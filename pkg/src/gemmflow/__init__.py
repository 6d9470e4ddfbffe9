"""gemmflow: deploy int8 object detectors onto a modelled systolic-array accelerator."""

__version__ = "0.1.0"

from . import accel, autotuner, dsp_pack, graph_ir, models, pruner, quantizer, reference, runtime, scheduler
from .accel import BASELINE, OURS, AcceleratorConfig, execute_stream, get_config
from .errors import (FeatureDisabledError, GemmflowError, ModelError, PartitionError, PruningError,
                     QuantizationError, ScheduleError, SimulationError)
from .graph_ir import Graph, count_gop, load_model, save_model

__all__ = [
    "__version__", "accel", "autotuner", "dsp_pack", "graph_ir", "models", "pruner", "quantizer",
    "reference", "runtime", "scheduler", "AcceleratorConfig", "OURS", "BASELINE", "get_config",
    "execute_stream", "Graph", "count_gop", "load_model", "save_model", "GemmflowError", "ModelError",
    "QuantizationError", "PruningError", "ScheduleError", "PartitionError", "SimulationError",
    "FeatureDisabledError",
]
