"""Exception hierarchy shared by every sgnet module."""


class SgnetError(Exception):
    """Base class for all library errors."""


class DimensionError(SgnetError, ValueError):
    pass


class ContractError(SgnetError, ValueError):
    """An argument violates a documented precondition."""


class NumericError(SgnetError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataError(SgnetError, ValueError):
    """A dataset or scene is unusable for the requested operation."""


class ConfigError(SgnetError, ValueError):
    pass


class ParseError(SgnetError, ValueError):
    """A file could not be decoded. ``location`` is ``"line:col"`` or ``"byte N"``."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class VersionError(SgnetError, ValueError):
    pass
