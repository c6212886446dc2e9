"""Exception hierarchy shared across cribwatch modules."""


class CribwatchError(Exception):
    """Base class for all package errors."""


# frames
class ParseError(CribwatchError):
    pass


class ValidationError(CribwatchError):
    pass


class EmptyDirectory(CribwatchError):
    pass


class UnsupportedFormat(CribwatchError):
    pass


class SourceError(CribwatchError):
    """A frame source failed mid-stream."""


# detect
class BoxOutOfBounds(CribwatchError):
    pass


class ResolutionMismatch(CribwatchError):
    pass


# classify
class BackendFailure(CribwatchError):
    def __init__(self, backend: str, message: str):
        super().__init__(f"{backend}: {message}")
        self.backend = backend


class DegenerateData(CribwatchError):
    pass


class NonFinite(CribwatchError):
    pass


class ConfigError(CribwatchError):
    pass


# temporal
class OutOfOrderFrame(CribwatchError):
    pass


# telemetry
class SinkUnavailable(CribwatchError):
    pass


class BufferFullCritical(CribwatchError):
    pass


class ConnectError(CribwatchError):
    pass


class TlsConfigError(CribwatchError):
    pass
