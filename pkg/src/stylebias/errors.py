"""Exception types shared across the toolkit."""


class StyleBiasError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(StyleBiasError):
    """Inputs disagree on structure (class vocabularies, architectures)."""


class IngestionError(StyleBiasError):
    def __init__(self, path, reason):
        super().__init__(f"cannot read {path}: {reason}")
        self.path = path


class ConfigurationError(StyleBiasError, ValueError):
    """A configuration can never produce a valid run."""


class TrainingError(StyleBiasError):
    """Optimization diverged.

    ``epoch`` is the epoch (or iteration) where it happened and ``history``
    holds the losses observed so far.
    """

    def __init__(self, message, epoch=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.history = list(history or [])


class OptimizationError(TrainingError):
    """Non-finite loss inside pixel-space optimization."""


class UndefinedReportError(StyleBiasError):
    """Every class had a zero shape-bias denominator."""


class LedgerConflictError(StyleBiasError):
    def __init__(self, keys):
        keys = list(keys)
        super().__init__("entries already exist: " + ", ".join(map(str, keys)))
        self.keys = keys


class FormattingError(StyleBiasError):
    pass


class ShapeError(SchemaError, ValueError):
    """Tensor shapes are incompatible with an operation or architecture."""
