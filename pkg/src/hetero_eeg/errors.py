"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class HeteroEEGError(Exception):
    """Base class for every error raised by this package."""

    code = "error"


class ConfigError(HeteroEEGError, ValueError):
    code = "config_error"


class DegenerateInputError(HeteroEEGError, ValueError):
    code = "degenerate_input"


class UnsupportedOperationError(HeteroEEGError):
    code = "unsupported_operation"


class FormatError(HeteroEEGError, ValueError):
    code = "format_error"


class VersionError(FormatError):
    code = "version_error"


class ShapeError(HeteroEEGError, ValueError):
    code = "shape_error"


class RoutingError(HeteroEEGError, KeyError):
    code = "routing_error"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class BatchPairingError(HeteroEEGError, ValueError):
    code = "batch_pairing_error"


class NumericError(HeteroEEGError, FloatingPointError):
    code = "numeric_error"


class HashMismatchError(HeteroEEGError):
    code = "hash_mismatch"
