"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class AtlasSegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AtlasSegError):
    """Invalid configuration, arguments, or usage."""


class DataError(AtlasSegError):
    """Malformed or inconsistent input data (files, shapes, probabilities)."""


class NumericalError(AtlasSegError):
    """Numerical failure: non-finite values where finite ones are required."""
