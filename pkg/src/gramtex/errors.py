"""Exception taxonomy shared by all engine modules."""


class GramtexError(Exception):
    """Base class for all engine errors."""


class DimensionError(GramtexError):
    """Operand shapes or dtypes are incompatible."""


class GeometryError(GramtexError):
    """A spatial-extent constraint is violated (padding, stride, pooling, taps)."""


class ContractError(GramtexError):
    """An API precondition was violated (non-scalar loss, misaligned taps, ...)."""


class FormatError(GramtexError):
    """A file is not in the expected binary/textual format."""


class ValidationError(GramtexError):
    """Contents parsed fine but fail semantic validation (missing tensor, bad shape)."""


class DataError(GramtexError):
    """Evaluation input data is unreadable or malformed."""


class SizeError(GramtexError):
    """An image is too small (or a crop too large) for the requested operation."""


class ConfigError(GramtexError):
    """A configuration value is out of its legal range."""
