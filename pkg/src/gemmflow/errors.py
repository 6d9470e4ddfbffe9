"""Exception hierarchy shared by all stages."""


class GemmflowError(Exception):
    """Base class for all toolchain errors."""


class ModelError(GemmflowError, ValueError):
    """Malformed model description, shape-rule violation or bad reference."""

    def __init__(self, message, node_id=None, field=None):
        self.node_id = node_id
        self.field = field
        where = []
        if node_id is not None:
            where.append(f"node {node_id!r}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class QuantizationError(GemmflowError, ValueError):
    pass


class PruningError(GemmflowError, ValueError):
    pass


class ScheduleError(GemmflowError, ValueError):
    """Illegal tiling schedule or unsupported lowering."""


class PartitionError(GemmflowError, ValueError):
    pass


class SimulationError(GemmflowError, RuntimeError):
    """Invalid instruction stream detected while simulating."""


class FeatureDisabledError(SimulationError):
    """Stream uses an accelerator feature that was compiled out."""
