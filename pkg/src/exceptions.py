"""
Error hierarchy for the Markov LSA inference toolkit.

Every error carries the process exit code the CLI maps it to, and errors that
stem from a violated modelling assumption name that assumption.
"""

from typing import Optional

EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_DIVERGENCE = 4


class LsaToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1

    def __init__(self, message: str, assumption: Optional[str] = None):
        super().__init__(message)
        self.assumption = assumption

    def __str__(self) -> str:
        message = super().__str__()
        if self.assumption:
            return f"{message} [assumption: {self.assumption}]"
        return message


class ConfigError(LsaToolkitError):
    """Raised when an experiment configuration is malformed."""
    exit_code = EXIT_CONFIG


class InvalidDimensionError(LsaToolkitError):
    """Raised when sizes, probabilities or shapes violate a contract."""
    exit_code = EXIT_CONFIG


class LayoutInfeasibleError(LsaToolkitError):
    """Raised when no solvable gridworld layout is found."""
    exit_code = EXIT_CONFIG


class DegenerateFeatureError(LsaToolkitError):
    """Raised when a feature row cannot be normalized."""
    exit_code = EXIT_CONFIG


class BlockTooLongError(LsaToolkitError):
    """Raised when a batch-means block does not fit the trajectory."""
    exit_code = EXIT_CONFIG


class DegenerateScaleError(LsaToolkitError):
    """Raised when a Gaussian target has non-positive scale."""


class AssumptionError(LsaToolkitError):
    """Raised when a diagnostic shows a modelling assumption fails."""
    exit_code = EXIT_ASSUMPTION


class NonConvergenceError(AssumptionError):
    """Raised when policy iteration exceeds its sweep budget."""


class ReducibleChainError(AssumptionError):
    """Raised when a Markov kernel has no unique positive stationary law."""


class SingularMatrixError(AssumptionError):
    """Raised when the mean system matrix cannot be inverted."""


class PoissonSolveError(AssumptionError):
    """Raised when the Poisson equation residual is too large."""


class LyapunovSingularError(AssumptionError):
    """Raised when the Lyapunov equation has no unique solution."""


class DegenerateDesignError(AssumptionError):
    """Raised when the feature design matrix is singular."""


class DivergenceError(LsaToolkitError):
    """Raised when an LSA run leaves the stable regime."""
    exit_code = EXIT_DIVERGENCE
