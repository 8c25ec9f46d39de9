"""Exception hierarchy.

Two families matter to callers: ``DataError`` (bad inputs, files, shapes) and
``NumericalError`` (the maths refused). The CLI maps them to exit codes 2 and 3.
"""


class KTPRError(Exception):
    """Base class for every error raised by this package."""


class DataError(KTPRError):
    pass


class NumericalError(KTPRError):
    pass


# -- data problems ------------------------------------------------------------

class DimensionMismatch(DataError, ValueError):
    pass


class InvalidTree(DataError, ValueError):
    pass


class SpecInvalid(DataError, ValueError):
    pass


class EmptyBoundary(DataError, ValueError):
    pass


class GridTooSmall(DataError, ValueError):
    pass


class MalformedHeader(DataError, ValueError):
    pass


class SizeMismatch(DataError, ValueError):
    pass


class IOFailure(DataError, OSError):
    pass


class NonTriangleFace(DataError, ValueError):
    pass


class OpenMesh(DataError, ValueError):
    pass


class BadIndex(DataError, ValueError):
    pass


# -- numerical problems ---------------------------------------------------------

class BranchAmbiguity(NumericalError):
    """A rotation angle reached the edge of the principal-log domain."""

    def __init__(self, angle, limit):
        self.angle = float(angle)
        self.limit = float(limit)
        super().__init__(
            f"rotation angle {self.angle:.6f} rad is outside the principal log "
            f"domain (must be < {self.limit:.6f} rad)"
        )


class Diverged(NumericalError):
    pass


class LineSearchStalled(NumericalError):
    pass


class TwistTooLarge(NumericalError, ValueError):
    pass


class OnSurface(NumericalError, ValueError):
    """Query point lies on (or within eps of) the mesh surface."""


class LeftDomain(NumericalError):
    """Flow points ended up outside the moving domain."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"{len(self.indices)} point(s) left the domain (first: {self.indices[:5]})")
