"""Exception hierarchy shared across the package."""


class StunetError(Exception):
    """Base class for all stunet errors."""


class DimensionError(StunetError):
    """Tensor or matrix extents do not line up."""


class NumericError(StunetError):
    """A forward operation produced NaN or Inf."""


class UsageError(StunetError):
    """An operation was called outside its contract."""


class GraphError(StunetError):
    """Invalid graph input (asymmetric, negative weights, ...)."""


class PartitionError(StunetError):
    """Invalid matching or partition structure."""


class DataError(StunetError):
    """Malformed dataset or adjacency file."""


class ModelError(StunetError):
    """Inconsistent model configuration."""


class MetricError(StunetError):
    """A metric could not be computed (e.g. all targets masked)."""


class CheckpointError(StunetError):
    """Checkpoint file failed to load or verify."""
