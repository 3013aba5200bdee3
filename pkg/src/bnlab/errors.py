"""Error types shared across the package.

Everything derives from ValueError or RuntimeError so callers that do not
care about the fine-grained class can catch the builtin.
"""


class DimensionError(ValueError):
    """Shapes or ranks do not line up."""


class SizeError(ValueError):
    """A count or length is too small (or otherwise out of range)."""


class DomainError(ValueError):
    """A scalar argument lies outside the mathematical domain of the map."""


class DegenerateBatchError(ValueError):
    """A normalization region contains fewer than two elements."""


class UninitializedStatsError(RuntimeError):
    """Evaluation-mode normalization requested before any statistics exist."""


class CacheMismatchError(RuntimeError):
    """A backward pass was handed a cache from a different forward pass."""


class GroupingError(ValueError):
    """Channel count is not divisible into the requested groups."""


class LabelError(ValueError):
    """A class label is outside [0, class_count)."""


class ConfigError(ValueError):
    """An experiment config file failed to parse or validate."""


class FormatError(ValueError):
    """A binary data file does not match the expected layout."""


class RunError(RuntimeError):
    """An experiment run failed for an environmental reason (I/O and similar)."""
