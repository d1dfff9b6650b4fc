"""Exception hierarchy shared by every vexir module.

Three families map onto the CLI exit codes: configuration problems (2), bad input data (3)
and broken internal invariants (4). Concrete errors also derive from the closest builtin so
code that catches ``ValueError`` or ``LookupError`` keeps working.
"""
from enum import IntEnum
from typing import Any, Sequence


class ExitCode(IntEnum):

    OK = 0
    CONFIG = 2
    DATA = 3
    INTERNAL = 4


class VexirError(Exception):
    exit_code = ExitCode.INTERNAL


class ConfigError(VexirError):
    exit_code = ExitCode.CONFIG


class DataError(VexirError):
    exit_code = ExitCode.DATA


class InvariantViolation(VexirError):
    exit_code = ExitCode.INTERNAL


# data errors
class ValidationError(DataError, ValueError):
    """A value breaks the invariants of its type (NaN, wrong shape, duplicate ids...)."""


class DimensionError(DataError, ValueError):
    pass


class ArityError(DataError, ValueError):
    pass


class DegenerateVectorError(DataError, ValueError):
    pass


class DegenerateCollectionError(DataError, ValueError):
    pass


class OutOfFitError(DataError, ValueError):
    pass


class CardinalityError(DataError, ValueError):
    pass


class CodeError(DataError, IndexError):
    pass


class EmptyLayerError(DataError, LookupError):
    pass


class EmptyIndexError(DataError, LookupError):
    pass


class LexicalInfoError(DataError, ValueError):
    pass


class IngestError(DataError, ValueError):
    pass


class WeightError(DataError, ValueError):
    pass


class DomainError(DataError, ValueError):
    pass


class BatchError(DataError, ValueError):
    pass


class MetricError(DataError, ValueError):
    pass


class FormatError(DataError, ValueError):
    """Unknown magic, truncated payload or malformed record in a data file."""


class ShortfallError(DataError, LookupError):
    """The retriever produced fewer negatives than requested.

    The negatives found so far are kept in ``partial``.
    """

    def __init__(self, msg: str, partial: Sequence[Any] = ()):
        super().__init__(msg)
        self.partial = list(partial)


# configuration errors
class ProbeError(ConfigError, ValueError):
    pass


class SubspaceError(ConfigError, ValueError):
    pass


# invariant violations
class ConsistencyError(InvariantViolation):
    pass


class GraphConnectivityError(InvariantViolation):
    pass
