"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: bad input -> 2, anything that
went wrong while solving -> 3.
"""


class RobustLqrError(Exception):
    """Base class for all package-specific errors."""


class InputError(RobustLqrError, ValueError):
    """Malformed user input: dimension mismatches, bad config keys, etc."""


class SolverError(RobustLqrError):
    """An iterative solver failed to converge or detected divergence."""


class NumericalError(RobustLqrError):
    """A numerically singular or ill-conditioned intermediate quantity."""


class DegenerateSolutionError(NumericalError):
    """KKT system at the solution is too ill-conditioned to differentiate.

    Callers are expected to fall back to finite differences when they see
    this; it is a property of the problem instance, not a bug.
    """


class GradientError(RobustLqrError):
    """Neither the implicit path nor the finite-difference fallback could
    produce a gradient (typically: re-solves under perturbation failed)."""


class ExpertGenerationError(RobustLqrError):
    """Random expert generation kept producing infeasible instances."""
