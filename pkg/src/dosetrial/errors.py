"""Exception hierarchy.

Every error maps onto one of three CLI exit codes: configuration (2),
data (3) and numerical failure (4).
"""


class DoseTrialError(Exception):
    exit_code = 1


class ConfigError(DoseTrialError):
    exit_code = 2


class DataError(DoseTrialError):
    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(DoseTrialError):
    exit_code = 4


# ingestion / data model
class MissingColumn(DataError):
    pass


class ValueOutOfRange(DataError):
    pass


class DuplicateKey(DataError):
    pass


class UnknownTreatmentLevel(DataError):
    pass


class MixedScales(DataError):
    pass


class ItemMismatch(DataError):
    pass


class EmptyOverlap(DataError):
    pass


class MissingResults(DataError):
    pass


# design
class UnknownVariable(DataError):
    pass


class EmptyFactorLevel(DataError):
    pass


class GridOutsideDesign(DataError):
    pass


class NoTimeTerm(DataError):
    pass


class NoRandomSlope(DataError):
    pass


# fitting
class RankDeficient(NumericalError):
    pass


class InsufficientRows(NumericalError):
    pass


class Separation(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class SingleObservationPerGroupWithSlope(NumericalError):
    pass


class NotNested(NumericalError):
    pass


class RowMismatch(NumericalError):
    pass


class NonNestedChain(NumericalError):
    pass


class DegenerateVariance(NumericalError):
    pass


class DegenerateMargin(NumericalError):
    pass


class FewerPointsThanClusters(NumericalError):
    pass


class NonMonotoneCurve(NumericalError):
    pass


class InvalidP(NumericalError):
    pass


class DuplicateTestId(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


class ScoreOutOfRange(UserWarning):
    """Raised as a warning: a score outside the steering curve is clamped."""
