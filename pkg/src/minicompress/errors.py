"""Exception types shared across the toolkit."""


class MiniCompressError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MiniCompressError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(MiniCompressError):
    """A hyperparameter or layer attribute is out of its legal range."""


class GraphError(MiniCompressError):
    """A layer graph violates its structural invariants."""


class PruningError(MiniCompressError):
    """A pruning plan is invalid or does not match the target graph."""


class DataFormatError(MiniCompressError):
    """An on-disk dataset or checkpoint file is malformed."""


class NumericsError(MiniCompressError):
    """A forward/backward pass produced non-finite values."""
