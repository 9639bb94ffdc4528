"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations


class WeatherGenError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(WeatherGenError, ValueError):
    """An input violated a documented contract."""


class ParseError(WeatherGenError, ValueError):
    """A document could not be decoded.

    ``location`` is a human-readable pointer (``path:line:col``) when known.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class EmptyInput(WeatherGenError):
    pass


class FormatError(WeatherGenError):
    pass


class DegenerateDistribution(WeatherGenError, ValueError):
    pass


class BackendUnavailable(WeatherGenError):
    """A backend kept failing after every retry was spent."""

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)


class TransportError(WeatherGenError):
    """One failed round trip to a backend; retryable."""


class ProtocolError(WeatherGenError):
    pass


class EmptyCompletion(WeatherGenError):
    pass


class RefusesResume(WeatherGenError):
    pass


class DuplicateIndex(WeatherGenError):
    pass


class LockHeld(WeatherGenError):
    pass


class IoError(WeatherGenError, OSError):
    pass
