"""Exception hierarchy shared by every subnetcl module."""


class SubnetError(Exception):
    """Base class for all library errors."""


class ConfigError(SubnetError, ValueError):
    """Invalid configuration or argument values."""


class DimensionError(SubnetError, ValueError):
    """Array shapes do not line up."""


class MissingHeadError(SubnetError, KeyError):
    """No output head registered for the requested task."""

    def __str__(self):
        return Exception.__str__(self)


class InvalidCacheError(SubnetError, RuntimeError):
    """A forward cache no longer matches the parameter store."""


class TrainingDivergedError(SubnetError, RuntimeError):
    """Loss became non-finite; ``state`` holds the last stable store."""

    def __init__(self, message, state=None, partial=None):
        super().__init__(message)
        self.state = state
        self.partial = partial


class IncompleteMatrixError(SubnetError, KeyError):
    """An accuracy-matrix entry needed by a metric is missing."""

    def __str__(self):
        return Exception.__str__(self)


class IntegrityError(SubnetError, ValueError):
    """Encoded bundle is corrupt or truncated."""


class ParseError(SubnetError, ValueError):
    """Malformed input file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateVectorError(SubnetError, ValueError):
    """Zero-norm vector where a direction is required."""


class MissingClassError(SubnetError, ValueError):
    """A requested class has no samples."""


class SessionSpecError(SubnetError, ValueError):
    """Few-shot session definition violates class disjointness."""
