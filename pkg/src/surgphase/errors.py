"""Exception types shared across modules.

The CLI maps each family to its own exit code.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file does not match the expected layout or config."""


class SegmentError(ValueError):
    """A temporal segment window is empty or out of range."""


class AggregationError(ValueError):
    """Segment outputs do not tile the temporal axis."""


class TrainingError(RuntimeError):
    """Optimisation produced a non-finite value."""


class InputError(ValueError):
    """Evaluation inputs disagree (lengths, ids, ranges)."""
