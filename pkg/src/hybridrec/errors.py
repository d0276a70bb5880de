"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HybridRecError(Exception):
    """Base class for all package errors."""


# --- index ---------------------------------------------------------------

class CentroidIndexError(HybridRecError):
    pass


class DimensionMismatchError(CentroidIndexError, ValueError):
    pass


class NonFiniteEmbeddingError(CentroidIndexError, ValueError):
    pass


class EmptyIndexError(CentroidIndexError):
    pass


class IndexFormatError(CentroidIndexError):
    """The on-disk index could not be decoded."""


class BadMagicError(IndexFormatError):
    pass


class UnsupportedVersionError(IndexFormatError):
    pass


class TruncatedIndexError(IndexFormatError):
    pass


class ChecksumError(IndexFormatError):
    pass


# --- gateway -------------------------------------------------------------

class GatewayError(HybridRecError):
    """A remote model endpoint failed to produce a usable answer."""


class TransportError(GatewayError):
    def __init__(self, message: str, status: int | None = None, retryable: bool = True):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


class ResponseParseError(GatewayError):
    """The endpoint answered, but the payload could not be interpreted."""

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class InvalidEmbeddingError(GatewayError, ValueError):
    pass


# --- router --------------------------------------------------------------

class RouterError(HybridRecError):
    """A recognition failed; ``stage`` names the pipeline step that broke."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- data / config -------------------------------------------------------

class ManifestError(HybridRecError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ConfigError(HybridRecError):
    pass
