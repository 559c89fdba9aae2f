class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


class NumericAbort(RuntimeError):
    """A run stopped on a non-finite value; the CLI maps it to exit code 3."""
