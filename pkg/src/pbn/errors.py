"""Exception types raised across the package."""


class PBNError(Exception):
    """Base class for all package errors."""


class ShapeError(PBNError, ValueError):
    pass


class SingularMatrix(PBNError, ArithmeticError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NoConvergence(PBNError, ArithmeticError):
    def __init__(self, residual, iterations):
        super().__init__(
            f"saddle point solve did not converge: residual {residual:.3e} "
            f"after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


class InfeasibleTarget(PBNError, ArithmeticError):
    """The requested feature vector lies outside the range of the saddle map."""


class DomainError(PBNError, ValueError):
    pass


class GroupError(PBNError, ValueError):
    pass


class SingularJacobian(PBNError, ArithmeticError):
    pass


class TrainingStall(PBNError, RuntimeError):
    pass


class PlanError(PBNError, ValueError):
    pass


class LengthError(PBNError, ValueError):
    pass


class Unclassifiable(PBNError, RuntimeError):
    pass


class AlignmentError(PBNError, ValueError):
    pass


class FormatError(PBNError, ValueError):
    """Malformed, truncated or version-mismatched file."""


class ConfigError(PBNError, ValueError):
    pass
