"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid scenario or run configuration."""


class ProtocolError(RuntimeError):
    """An object was used out of sequence, e.g. stepping a finished episode."""


class ShapeError(ValueError):
    """Array or network dimensions do not match what was expected."""


class CorruptFileError(ValueError):
    """A weight or table file is truncated or fails its integrity check."""
