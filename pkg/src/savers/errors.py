"""Exception types raised across the package."""


class SaversError(Exception):
    """Base class for all package errors."""


class DimensionError(SaversError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(SaversError, ValueError):
    """Invalid configuration value or combination."""


class FormatError(SaversError, ValueError):
    """Malformed file contents (checkpoint, chip, PGM, CSV)."""

    def __init__(self, message, offset=None, path=None):
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))
        self.offset = offset
        self.path = path


class DataError(SaversError, ValueError):
    """Label or class values outside their legal range."""


class CorruptionError(SaversError, ValueError):
    """Internal bookkeeping (indices, parameter maps) is inconsistent."""


class PlacementError(SaversError, ValueError):
    """A scene placement is out of bounds or overlaps another target."""


class EmptyMaskError(SaversError, ValueError):
    """Label creation found no pixel above the threshold."""
