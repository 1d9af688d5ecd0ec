"""Exception hierarchy. Each class carries the CLI exit code for its failure class."""


class PhasediffError(Exception):
    exit_code = 1


class ConfigError(PhasediffError):
    """Malformed or unknown configuration input."""

    exit_code = 2


class BadRange(ConfigError):
    """Invalid schedule or parameter range."""

    exit_code = 2


class QuadratureFailure(PhasediffError):
    """Numerical integration failed or produced an invalid covariance."""

    exit_code = 3


class NotSPD(PhasediffError):
    """Matrix is not symmetric positive-definite."""

    exit_code = 4


class DegenerateCovariance(NotSPD):
    """A mixture-component covariance lost positive-definiteness."""

    exit_code = 4


class Singular(PhasediffError):
    """2x2 block is numerically singular."""

    exit_code = 5


class SingularCOut(Singular):
    """C_out is not invertible (typically at or below the time cutoff)."""

    exit_code = 5


class SingularA(Singular):
    """A coefficient matrix in the table failed the invertibility check."""

    exit_code = 5


class SolverFailure(PhasediffError):
    """Adaptive ODE reference solve did not converge."""

    exit_code = 6


class MissingTable(PhasediffError):
    """A conjugate sampler was invoked without its coefficient table."""

    exit_code = 7


class InsufficientHistory(PhasediffError):
    """Multistep update requested more past evaluations than available."""

    exit_code = 7
