"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for usage problems,
3 for data/format problems, 4 for numerical aborts.
"""


class PLCLError(Exception):
    exit_code = 1


class UsageError(PLCLError):
    exit_code = 2


class ContractError(PLCLError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 2


class ShapeError(ContractError):
    pass


class ParameterError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class DataError(PLCLError):
    exit_code = 3


class VocabularyError(DataError, IndexError):
    pass


class AlignmentError(DataError):
    pass


class GenerationError(DataError):
    pass


class ParseError(DataError):
    pass


class FormatError(DataError):
    pass


class CompatibilityError(DataError):
    pass


class SamplingError(DataError):
    pass


class AugmentationError(DataError):
    pass


class MetricError(DataError):
    pass


class NumericalError(PLCLError, ArithmeticError):
    exit_code = 4
