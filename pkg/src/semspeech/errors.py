"""Exception types shared across the toolkit."""


class SemspeechError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SemspeechError, ValueError):
    """A spec, config, or argument failed its invariants.

    ``field`` names the offending field when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class FileFormatError(SemspeechError, ValueError):
    """A binary or text artifact could not be parsed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingGroundTruthError(SemspeechError, RuntimeError):
    """An operation needed ground-truth symbols the data does not carry."""


class PairBinningError(SemspeechError, ValueError):
    """Stratified pair construction could not satisfy a score bin.

    ``bin_range`` is the (low, high) score range of the offending bin.
    """

    def __init__(self, message: str, bin_range: tuple[float, float] | None = None):
        super().__init__(message)
        self.bin_range = bin_range


class ConfigError(SemspeechError, ValueError):
    """A pipeline config file contains an unknown or malformed entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
