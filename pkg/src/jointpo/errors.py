"""Exception and warning types raised across the package."""


class JointPOError(Exception):
    """Base class for all package errors."""


class ValidationError(JointPOError, ValueError):
    """Input data or configuration failed validation."""


class EstimationError(JointPOError, ArithmeticError):
    """An estimator could not produce a value."""


# data validation
class NonBinaryValue(ValidationError):
    pass


class RaggedCovariates(ValidationError):
    pass


class MissingValue(ValidationError):
    pass


class EmptyStratumArm(ValidationError):
    pass


class DegenerateBins(ValidationError):
    pass


class UnknownColumn(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConfigError(ValidationError):
    pass


class KnotOrderError(ValidationError):
    pass


class FoldArmEmpty(ValidationError):
    pass


class MissingNuisance(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class StructuralProbabilityOutOfRange(ValidationError):
    pass


# estimation
class RankDeficient(EstimationError):
    pass


class SingularNormalEquations(EstimationError):
    pass


class InsufficientGrid(EstimationError):
    pass


class SingularJacobian(EstimationError):
    pass


class NonConvergence(EstimationError):
    pass


class DegenerateTheta(EstimationError):
    pass


class TooManyFailedReplicates(EstimationError):
    pass


# warnings
class SeparationWarning(UserWarning):
    """Unpenalized logistic fit is diverging (quasi-complete separation)."""


class OutOfSupportWarning(UserWarning):
    """Spline evaluated outside its boundary knots; values were clamped."""


class WeakIdentificationWarning(UserWarning):
    """Most rows have a control risk near 0 or 1, so one parameter block is weakly identified."""


class ConvergenceWarning(UserWarning):
    pass
