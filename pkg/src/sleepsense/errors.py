"""Exception hierarchy shared by every module.

The three top-level families map onto the CLI exit codes: configuration
problems (2), bad input data (3) and endpoint failures (4).
"""


class SleepSenseError(Exception):
    """Base class for all package errors."""


class ConfigError(SleepSenseError):
    exit_code = 2


class DataError(SleepSenseError):
    exit_code = 3


class EndpointError(SleepSenseError):
    exit_code = 4


# ingest
class MalformedHeader(DataError):
    pass


class InconsistentRecord(DataError):
    pass


class ZeroDigitalRange(DataError):
    pass


class UnknownLabel(DataError):
    pass


class OverlappingAnnotations(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row, column, value):
        super().__init__(f"non-numeric cell {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.value = value


class InvalidActivityCode(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class NoAnnotationCoverage(DataError):
    pass


class InsufficientEpochs(DataError):
    pass


# dsp
class CutoffAboveNyquist(DataError):
    pass


class UnstableSection(DataError):
    pass


class EpochTooShort(DataError):
    pass


class EmptyInput(DataError):
    pass


class UnknownChannel(DataError):
    pass


# render
class EmptyGrid(DataError):
    pass


class EmptyMatrix(DataError):
    pass


# classify
class SingleClassTrain(DataError):
    pass


class NonFiniteFeature(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyTrain(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyEvaluation(DataError):
    pass


# psqi
class IncompleteResponse(DataError):
    def __init__(self, missing):
        super().__init__("incomplete PSQI response, missing: " + ", ".join(missing))
        self.missing = list(missing)


# llm_bridge
class PayloadKindMismatch(ConfigError):
    pass


class WrongExampleCount(ConfigError):
    pass


class DuplicateStageExample(ConfigError):
    pass


class AuthError(EndpointError):
    pass


class RateLimited(EndpointError):
    pass


class ServerError(EndpointError):
    pass


class Timeout(EndpointError):
    pass


class MalformedResponse(EndpointError):
    pass


class ReplayMiss(EndpointError):
    """A replayed run asked for a bundle that has no recorded response."""


# feedback
class EmptyProfile(DataError):
    pass


# cli
class ConfigConflict(ConfigError):
    pass
