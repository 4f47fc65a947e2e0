"""Exception types shared across the package."""


class StructDialError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(StructDialError, ValueError):
    pass


class ShapeError(StructDialError, ValueError):
    pass


class NumericError(StructDialError, ArithmeticError):
    pass


class CapacityError(StructDialError, ValueError):
    pass


class VocabularyError(StructDialError, IndexError):
    pass


class ContractViolation(StructDialError, ValueError):
    pass


class DataError(StructDialError, ValueError):
    pass


class SamplingError(StructDialError, ValueError):
    pass


class ConfigError(StructDialError, ValueError):
    pass


class VersionError(StructDialError, ValueError):
    pass
