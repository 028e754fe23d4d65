"""Exception hierarchy.

Errors split into two families so that the command line can map them onto
exit codes: :class:`DataError` (bad input, exit 2) and :class:`NumericalError`
(singular or divergent numerics, exit 3).
"""


class TSBridgeError(Exception):
    """Base class for all package errors."""


class DataError(TSBridgeError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(TSBridgeError, ArithmeticError):
    """A numerical precondition failed (singularity, divergence, ...)."""


# topology
class InvalidIndex(DataError):
    pass


class DuplicateSimplex(DataError):
    pass


class DanglingTriangle(DataError):
    pass


class IncompatibleKind(DataError):
    pass


class DegeneratePoints(DataError):
    pass


class MissingProjectors(DataError):
    pass


# spectral
class NotSymmetric(DataError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class SingularFunctionValue(NumericalError):
    pass


# dynamics / bridge
class SingularOperator(NumericalError):
    pass


class EndpointSingularity(NumericalError):
    pass


class SingularEndpointCovariance(NumericalError):
    pass


class SingularMarginal(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class NotPSD(DataError):
    pass


# simulation
class NonFiniteState(NumericalError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state encountered at step {step}")


# metrics
class SizeLimitExceeded(DataError):
    pass


class NoConvergence(NumericalError):
    pass
