"""Exception types shared across the package."""


class NqacbmError(Exception):
    """Base class for package errors."""


class DimensionError(NqacbmError, ValueError):
    """A vector/sample width does not match the problem it is evaluated against."""


class CapacityError(NqacbmError, ValueError):
    """Problem too large to enumerate, or hardware graph too small to embed."""


class DomainError(NqacbmError, ValueError):
    """An argument is outside its mathematical domain (alpha <= 0, bad penalty, ...)."""


class ConfigError(NqacbmError, ValueError):
    """An experiment configuration failed to parse or validate."""


class RemoteError(NqacbmError):
    """Base class for remote-backend failures."""


class RemoteNetworkError(RemoteError):
    """The endpoint could not be reached."""


class RemoteAuthError(RemoteError):
    """The endpoint rejected the credentials (HTTP 401/403)."""


class RemoteProtocolError(RemoteError):
    """The endpoint answered with something other than the documented protocol."""


class IdxParseError(NqacbmError, ValueError):
    """Base class for IDX file parse failures."""


class IdxMagicError(IdxParseError):
    """IDX magic number is not the expected one."""


class IdxTruncationError(IdxParseError):
    """IDX file ends before the declared payload; message names the offset."""


class IdxCountMismatchError(IdxParseError):
    """Image and label files declare different record counts."""
