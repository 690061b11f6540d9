"""Exception types shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific type that applies rather than bare ValueError.
"""


class DimensionError(ValueError):
    """Shape or name mismatch between matrices or parameter collections."""


class CacheError(ValueError):
    """A forward cache was paired with the wrong layer or gradient."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class InfeasibleTargetError(ValidationError):
    """Target label sequence cannot be emitted within the available frames."""


class GuardError(ValueError):
    """Instance exceeds the hard size guard of an exhaustive computation."""


class NumericError(ArithmeticError):
    """Non-finite value appeared where a finite one is required."""


class UnknownLanguageError(KeyError):
    """Language id has no head (or no alphabet) in the model."""


class ParseError(ValueError):
    """Malformed file content (corpus, config, checkpoint)."""


class ConfigError(ValueError):
    """Invalid configuration value or command usage."""
