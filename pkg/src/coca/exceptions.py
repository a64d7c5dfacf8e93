"""Exception taxonomy shared across the package.

Two families matter for the CLI exit-code contract: user/input problems
(``ValidationError``, exit code 1) and numerical failures encountered on
otherwise valid input (``NumericalError``, exit code 2).
"""


class CocaError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(CocaError, ValueError):
    """Invalid input data or configuration."""


class NumericalError(CocaError, ArithmeticError):
    """A computation could not be carried out on valid input."""


# --- data / configuration -------------------------------------------------

class DimensionMismatch(ValidationError):
    pass


class NonBinaryTreatment(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class DegenerateTreatmentArm(ValidationError):
    pass


class TooFewUnits(ValidationError):
    pass


class InfeasibleStratification(ValidationError):
    pass


class DegenerateData(ValidationError):
    pass


class NonSymmetric(ValidationError):
    pass


class RelevanceViolation(ValidationError):
    pass


class MismatchedUnits(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class RankDeficientDesign(ValidationError):
    pass


# --- numerical ------------------------------------------------------------

class NonPositivePilot(NumericalError):
    pass


class ZeroDenominator(NumericalError):
    pass


class NoTreatedUnits(NumericalError):
    pass


class Infeasible(NumericalError):
    pass


class AllCandidatesFailed(NumericalError):
    pass


# --- CLI ------------------------------------------------------------------

class UnknownFlag(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class ConflictingOptions(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, row, column, message=""):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {message}" if message
                         else f"row {row}, column {column!r}")
