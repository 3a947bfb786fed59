"""Exception types raised across the package."""


class MuleError(Exception):
    """Base class for all package errors."""


class ShapeError(MuleError, ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(MuleError, ValueError):
    """A sentence or sequence has no elements."""


class BatchTooSmallError(MuleError, ValueError):
    """Batch normalization in training mode needs at least two rows."""


class DegenerateInputError(MuleError, ValueError):
    """Input is degenerate for the operation (zero vector, single class...)."""


class LabelError(MuleError, ValueError):
    """A class label is outside the valid range."""


class ContractError(MuleError, ValueError):
    """A caller violated an API precondition."""


class ParseError(MuleError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConfigError(MuleError, ValueError):
    """Invalid configuration value or key."""


class SamplingError(MuleError, ValueError):
    """The sampler cannot satisfy the request."""


class CheckpointError(MuleError, ValueError):
    """A checkpoint directory is missing tensors or is malformed."""


class TrainingDiverged(MuleError, RuntimeError):
    """Loss or gradient became non-finite; carries the last good parameters."""

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class SelfTestError(MuleError, RuntimeError):
    """The pre-training gradient self-test failed."""
