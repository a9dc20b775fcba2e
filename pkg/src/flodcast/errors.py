"""Exception hierarchy shared by every flodcast module."""


class FlodcastError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(FlodcastError, ValueError):
    pass


class OutOfRangeError(FlodcastError, IndexError):
    pass


class ConfigurationError(FlodcastError, ValueError):
    pass


class UnsupportedConfigurationError(ConfigurationError):
    pass


class FormatError(FlodcastError, ValueError):
    """Malformed raster, manifest or report file. ``field`` names the culprit."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class CheckpointError(FlodcastError):
    pass


class EmptyReportError(FlodcastError, ValueError):
    """Raised when an evaluation has no valid pixels or instances to score."""
