"""Exception types shared across the package."""


class CrbmgenError(Exception):
    """Base class for all crbmgen errors."""


class MidiParseError(CrbmgenError):
    """Raised on malformed or unsupported Standard MIDI File input."""


class EmptyPieceError(CrbmgenError):
    """Raised when an ingested piece contains no usable notes."""


class FormatError(CrbmgenError):
    """Raised on bad magic, truncation, or corrupt fields in a binary file."""


class DimensionError(CrbmgenError):
    """Raised when array shapes, strides, or window sizes are incompatible."""


class ConfigError(CrbmgenError):
    """Raised on unknown keys or unparseable values in a run configuration."""
