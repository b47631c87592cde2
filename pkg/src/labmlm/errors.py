"""Exception taxonomy shared across the package."""


class LabMLMError(Exception):
    """Base class for every error raised by this library."""


class DimensionError(LabMLMError):
    """Array shapes are incompatible for the requested operation."""


class ConfigError(LabMLMError):
    """A configuration value is out of range or inconsistent."""


class ContractError(LabMLMError):
    """An API precondition was violated by the caller."""


class DataError(LabMLMError):
    """Input data is malformed or empty where content is required."""


class VocabError(LabMLMError):
    """A code or token id is unknown to the vocabulary in use."""


class FormatError(LabMLMError):
    """An on-disk file violates its binary or JSON format."""


class NumericError(LabMLMError):
    """A computation hit non-finite values or an undefined statistic."""


class DecodeError(LabMLMError):
    """A predicted distribution is too degenerate to decode."""
