"""Exception and warning types."""


class SplatLodError(Exception):
    pass


class NotSPD(SplatLodError, ValueError):
    """Matrix is not symmetric positive definite."""


class MissingForwardState(SplatLodError, RuntimeError):
    pass


class DegenerateSpread(SplatLodError, ValueError):
    """Depth statistics have zero spread, alignment is undefined."""


class EmptyScene(SplatLodError, ValueError):
    pass


class DimensionMismatch(SplatLodError, ValueError):
    pass


class MalformedHeader(SplatLodError, ValueError):
    pass


class TruncatedRecord(SplatLodError, ValueError):
    pass


class UnsupportedShDegree(SplatLodError, ValueError):
    pass


# Recoverable conditions: reported as warnings, the operation falls back.

class AllZeroWeights(UserWarning):
    """Every merge weight was zero; uniform weights were used instead."""


class DegenerateCovariance(UserWarning):
    """Merged covariance was rank deficient and got regularized."""


class NoInteriorNodes(UserWarning):
    """Hierarchy has nothing to refine."""
