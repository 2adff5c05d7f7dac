"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SiamTrackError(Exception):
    exit_code = 1


class ConfigError(SiamTrackError, ValueError):
    """Invalid shapes, constants or configuration values."""

    exit_code = 1


class UsageError(SiamTrackError, RuntimeError):
    """API misuse: wrong call order, bad arguments, missing frames."""

    exit_code = 1


class DataError(SiamTrackError, IOError):
    """Malformed or inconsistent files on disk."""

    exit_code = 2


class NumericalError(SiamTrackError, ArithmeticError):
    """NaN/Inf values or failed gradient checks."""

    exit_code = 3
