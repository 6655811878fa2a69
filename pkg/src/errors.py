"""
Error types shared by every solver module.

All domain failures derive from SolverError. Each class carries the CLI exit
status it maps to, so the command layer can translate any failure without a
lookup table:

    exit 1  input could not be parsed or validated
    exit 2  a solver or reduction failed at runtime
    exit 3  verification found a failed check (raised by the CLI itself)
"""

EXIT_PARSE = 1
EXIT_SOLVER = 2
EXIT_VERIFY = 3


class SolverError(Exception):
    """
    Base class for all solver failures.

    Attributes:
        message: Human-readable error description
        exit_code: CLI exit status for this failure
    """

    exit_code: int = EXIT_SOLVER

    def __init__(self, message: str, exit_code: int | None = None):
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(message)


# ----- Input validation (exit 1) -----


class InputError(SolverError):
    exit_code = EXIT_PARSE


class DimensionMismatch(InputError):
    pass


class UnbalancedMarginals(InputError):
    """Sum of demands differs from sum of supplies."""


class NonPositiveMarginal(InputError):
    pass


class NonIntegralMarginal(InputError):
    pass


class NonFiniteCost(InputError):
    pass


class NonIntegralCost(InputError):
    pass


class InvalidMccInstance(InputError):
    pass


class IsolatedVertex(InputError):
    """A circulation vertex has no incoming capacity (empty OT row)."""


class FormatError(InputError):
    pass


# ----- Solver runtime (exit 2) -----


class DegenerateCost(SolverError):
    """The cost matrix is identically zero, so the starting eta is undefined."""


class NumericUnderflow(SolverError):
    pass


class PreconditionViolated(SolverError):
    pass


class IterationCapExceeded(SolverError):
    """
    The step count passed the safety cap.

    Attributes:
        steps: Number of steps executed before giving up
    """

    def __init__(self, message: str, steps: int):
        self.steps = steps
        super().__init__(message)


class InfeasibleExtraction(SolverError):
    pass


class ConservationViolation(SolverError):
    pass


# ----- Command line -----


class UsageError(InputError):
    """Invalid command-line flags."""


class VerificationFailed(SolverError):
    """
    A plan failed one or more verification checks.

    Attributes:
        failures: One line per failed check
    """

    exit_code = EXIT_VERIFY

    def __init__(self, failures: list[str]):
        self.failures = failures
        super().__init__("Verification failed: " + "; ".join(failures))
