"""
Error types for DeskCLR.

Every error carries the process exit code the command line maps it to.
"""


class DeskCLRError(Exception):
    """Base class for all DeskCLR errors."""

    exit_code = 1


class ConfigurationError(DeskCLRError, ValueError):
    """Invalid or unknown configuration values."""

    exit_code = 2


class InsufficientPopulationError(ConfigurationError):
    """More samples were requested than the population holds."""


class SplitError(ConfigurationError):
    """A stratified split cannot be formed."""


class NumericError(DeskCLRError, ArithmeticError):
    """Non-finite values reached a loss, gradient or parameter."""

    exit_code = 3


class DegenerateInputError(NumericError):
    """A vector that must be normalized has (near) zero length."""


class FormatError(DeskCLRError):
    """A binary file has a bad magic number, is truncated or inconsistent."""

    exit_code = 4


class IndexOutOfRangeError(DeskCLRError, IndexError):
    """An instance or cluster index lies outside the stored population."""


class InvalidStateError(DeskCLRError):
    """Internal state cannot support the requested operation."""


class NoNegativesError(DeskCLRError):
    """An anchor has no negative candidates under the current pseudo-labels."""
