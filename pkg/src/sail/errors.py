"""Exception hierarchy.

The CLI maps each family to an exit code: validation 2, solver 3,
assertion 4.
"""


class SailError(Exception):
    exit_code = 1


class ValidationError(SailError, ValueError):
    """A precondition on inputs or configuration is violated."""

    exit_code = 2


class SolverError(SailError, RuntimeError):
    """A numerical solve or time integration failed."""

    exit_code = 3


class GrowthGuardTripped(SolverError):
    pass


class DivergenceError(SolverError):
    pass


class InvariantViolation(SailError, AssertionError):
    """An asserted invariant did not hold on a completed run."""

    exit_code = 4


class CompatibilityWarning(UserWarning):
    """Input was projected to satisfy a solvability condition."""


class HypothesisWarning(UserWarning):
    """A hypothesis of the uniqueness/stability theory is not met."""
