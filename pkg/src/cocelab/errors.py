"""Exception types shared across the package."""


class CocelabError(Exception):
    pass


class NonFiniteError(CocelabError, FloatingPointError):
    """An input or intermediate quantity was NaN or infinite."""


class ConfigError(CocelabError, ValueError):
    """An experiment, objective, or transform configuration is invalid."""


class UnsupportedStrategyError(ConfigError):
    pass


class CrossingPreconditionError(CocelabError, ValueError):
    """The constructed scenario does not cross the threshold from below."""


class CSVFormatError(CocelabError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
