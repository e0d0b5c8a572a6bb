"""Exception hierarchy shared by all modules.

Every error maps onto one of the CLI exit classes: data errors (2) or
numeric failures (3). Usage errors are handled by argparse.
"""


class RayDFError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class DataError(RayDFError, ValueError):
    exit_code = 2


class NumericError(RayDFError, ArithmeticError):
    exit_code = 3


# geometry
class NoIntersection(DataError):
    pass


class OriginInside(DataError):
    pass


class DegenerateRay(DataError):
    pass


class NegativeResult(DataError):
    pass


class BehindCamera(DataError):
    pass


class PointOutsideSphere(DataError):
    pass


class DegenerateGradient(NumericError):
    pass


class PoleSingularity(NumericError):
    pass


# dataset
class OutOfRange(DataError):
    pass


class EmptyStore(DataError):
    pass


class InsufficientScans(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


# nn
class ShapeMismatch(DataError):
    pass


class DomainError(DataError):
    pass


class NonFiniteGradient(NumericError):
    pass


# training
class SingleClassData(DataError):
    pass


class MissingClassifier(DataError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


# evaluation
class EmptyMask(DataError):
    pass


class EmptySet(DataError):
    pass


class ConfigError(DataError):
    pass
