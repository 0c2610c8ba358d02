"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``InputError`` -> 2,
``MissingPrerequisiteError`` -> 3, ``NumericalError`` -> 4.
"""


class HurdleSAEError(Exception):
    """Base class for all package errors."""


class InputError(HurdleSAEError, ValueError):
    """Bad user input: malformed files, invalid values, bad configuration."""


class SchemaError(InputError):
    """A required column or covariate is missing, or extras do not match."""


class ValidationError(InputError):
    """Values violate a data invariant (negative response, duplicate ids, ...)."""


class ConfigError(InputError):
    """Invalid run or sampler configuration."""


class MissingPrerequisiteError(HurdleSAEError, FileNotFoundError):
    """An artifact required by a command does not exist."""


class NumericalError(HurdleSAEError, ArithmeticError):
    """A numerical routine failed (singular system, non-PD precision, ...)."""
