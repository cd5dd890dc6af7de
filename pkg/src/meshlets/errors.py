"""Exception hierarchy shared by all meshlet modules."""


class MeshletError(Exception):
    """Base class for every error raised by this package."""


class ParseError(MeshletError, ValueError):
    """A mesh or point file is malformed."""


class DegenerateVertexError(MeshletError, ValueError):
    pass


class DegenerateBoundsError(MeshletError, ValueError):
    pass


class IsolatedVertexError(MeshletError, ValueError):
    pass


class EmptyInputError(MeshletError, ValueError):
    pass


class ParamFailure(MeshletError):
    """Geodesic propagation could not cover a disk around the center."""


class InsufficientCoverage(MeshletError):
    """Too few grid cells fall inside the parametrized disk."""


class DegenerateTangentsError(MeshletError, ValueError):
    pass


class CoverageImpossible(MeshletError):
    pass


class BadDimError(MeshletError, ValueError):
    pass


class DimMismatchError(MeshletError, ValueError):
    pass


class NonFiniteError(MeshletError, FloatingPointError):
    pass


class CheckpointError(MeshletError, OSError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class NoTargetsError(MeshletError, ValueError):
    pass


class RemeshFailure(MeshletError):
    pass


class EmptyResultError(MeshletError, ValueError):
    pass


class ConfigError(MeshletError, ValueError):
    """Unknown or invalid configuration key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
