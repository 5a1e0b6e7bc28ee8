"""Exception hierarchy shared by every stage of the pipeline."""


class ApexError(Exception):
    """Base class for all errors raised by apex_ood."""


class LoadError(ApexError):
    """An input file is missing, malformed, or fails validation."""


class ConfigError(ApexError, ValueError):
    """A configuration value or operation argument is invalid."""


class InfeasibleError(ApexError):
    """The requested fit cannot be performed on the given data."""


class NumericalError(ApexError, ArithmeticError):
    """A computation produced a non-finite or degenerate result."""
