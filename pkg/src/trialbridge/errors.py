"""Exception types shared across the package.

Error messages are expected to name the module they originate from and the
violated precondition, so callers (and the CLI) can report provenance.
"""


class TrialBridgeError(Exception):
    """Base class for all package errors."""


class ValidationError(TrialBridgeError):
    """Input data or configuration violates a documented contract."""


class EstimationError(TrialBridgeError):
    """An estimation step failed on otherwise well-formed inputs."""


class ConvergenceError(EstimationError):
    """An iterative solver exhausted its iteration budget.

    Carries the last residual so callers can report how far from a root the
    solver stopped.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SeparationError(EstimationError):
    """Complete or quasi-complete separation in a logistic model.

    Finite-sample symptom of a positivity violation; surfaced loudly rather
    than returning a divergent fit.
    """


class RankDeficientDesignError(EstimationError):
    """Design matrix has linearly dependent columns."""


class DegenerateOutcomeError(EstimationError):
    """All outcomes identical; the logistic MLE does not exist."""


class SingularMatrixError(EstimationError):
    """A matrix that must be inverted is numerically singular."""


class PositivityError(EstimationError):
    """An (arm, trial, observed) cell required by an estimator is empty."""
