class YlabError(Exception):
    """Base class for every error raised by ylab."""

    pass


class InvalidArgumentError(YlabError, ValueError):
    """An argument was outside the accepted domain."""

    pass


class NumericError(YlabError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CacheStateError(YlabError, RuntimeError):
    """KV-cache state did not match the decoding position."""

    pass


class UsageError(YlabError):
    """Command line or config file could not be parsed."""

    pass


class AcceptanceFailure(YlabError):
    """An acceptance check did not hold."""

    pass
