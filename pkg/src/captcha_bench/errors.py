"""Exception hierarchy shared across the package."""


class CaptchaBenchError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CaptchaBenchError):
    """Invalid configuration value or combination."""


class DataError(CaptchaBenchError):
    """Broken input data: missing files, malformed labels, bad manifests."""


class InvalidBoxError(DataError):
    """Box violates its geometric invariants."""


class DegenerateBoxError(InvalidBoxError):
    """Box has zero width or height."""


class BoundsError(DataError):
    """Box coordinates fall outside the image frame."""


class LabelParseError(DataError):
    """A label file line could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SkipRecordError(CaptchaBenchError):
    """One synthesis record cannot be produced; callers log and move on."""


class DetectorError(CaptchaBenchError):
    """Base class for detector backend failures."""


class DetectorUnavailableError(DetectorError):
    """Detector process could not be started or died."""


class DetectorTimeoutError(DetectorError):
    """Detector did not answer within the configured timeout."""


class ProtocolError(DetectorError):
    """Detector reply violates the wire schema."""
