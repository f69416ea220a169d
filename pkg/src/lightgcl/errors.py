"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class LightGCLError(Exception):
    exit_code = 1


class ConfigError(LightGCLError, ValueError):
    """Invalid hyperparameter, option, or argument."""

    exit_code = 1


class DataError(LightGCLError):
    """Unreadable or inconsistent input data."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class EmptyInputError(DataError):
    pass


class NumericalError(LightGCLError, FloatingPointError):
    """A non-finite value showed up where it must not."""

    exit_code = 3
