"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class WDTError(Exception):
    category = "error"


class ConfigError(WDTError, ValueError):
    category = "config"


class ShapeError(WDTError, ValueError):
    category = "shape"


class ValidationError(WDTError, ValueError):
    category = "validation"


class IngestionError(WDTError, OSError):
    category = "ingestion"


class DegenerateInputError(WDTError, ValueError):
    category = "degenerate-input"


class RangeError(WDTError, IndexError):
    category = "range"


class DivergenceError(WDTError, FloatingPointError):
    category = "divergence"


class UndefinedMetricError(WDTError, ValueError):
    category = "undefined-metric"
