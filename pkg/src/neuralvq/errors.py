"""Exception types shared across the library.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message wording: ConfigError -> 2, DataFormatError -> 3,
NumericalError -> 4.
"""


class NeuralVqError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(NeuralVqError):
    """Invalid, contradictory, or unknown configuration."""


class DataFormatError(NeuralVqError):
    """Malformed or inconsistent on-disk data (vecs containers, code files)."""


class NumericalError(NeuralVqError):
    """Non-finite values or a singular system where finite math is required."""
