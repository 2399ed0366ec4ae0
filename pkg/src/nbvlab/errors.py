"""Exception hierarchy shared by every nbvlab module."""


class NBVError(Exception):
    """Base class; ``category`` is printed by the CLI on failure."""

    category = "error"


class DimensionError(NBVError, ValueError):
    category = "dimension"


class ParameterError(NBVError, ValueError):
    category = "parameter"


class DegenerateInputError(NBVError, ValueError):
    category = "degenerate-input"


class PreconditionError(NBVError, ValueError):
    category = "precondition"


class ArtifactError(NBVError, OSError):
    """Missing or unreadable file produced by an earlier pipeline stage."""

    category = "io"
