"""Exception hierarchy shared across the package."""


class RFNError(Exception):
    """Base class for all package errors."""


class ShapeError(RFNError, ValueError):
    pass


class ConfigError(RFNError, ValueError):
    pass


class InputError(RFNError, ValueError):
    pass


class CorpusError(RFNError):
    """Raised when a dataset directory cannot be ingested (missing, orphaned or undecodable files)."""


class FormatError(RFNError):
    """Raised for malformed checkpoint files."""


class NumericError(RFNError, ArithmeticError):
    """Raised when training diverges (NaN/Inf loss) or a decomposition fails."""
