"""Exception types raised across the package."""


class BayesFedError(Exception):
    """Base class for all package errors."""


class UsageError(BayesFedError, ValueError):
    """An operation was called with arguments outside its contract."""


class ShapeError(BayesFedError, ValueError):
    """Array shapes or lengths do not line up."""


class ConfigError(BayesFedError, ValueError):
    """Invalid experiment configuration. The message carries the key path."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class IdxFormatError(BayesFedError, ValueError):
    """Malformed IDX file."""


class ClientUpdateError(BayesFedError, RuntimeError):
    """A client's local update failed; the round is aborted."""

    def __init__(self, client_id: int, cause: BaseException):
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"client {client_id} failed: {type(cause).__name__}: {cause}")
