"""Exception hierarchy.

User-facing errors (bad inputs, bad files, bad config) derive from
``UserInputError`` and map to CLI exit code 1; everything else that we raise
deliberately derives from ``StylelessError`` and maps to exit code 2.
"""


class StylelessError(Exception):
    """Base class for all errors raised by this package."""


class UserInputError(StylelessError):
    """Invalid input supplied by the caller (CLI exit code 1)."""


class InvalidLabelError(UserInputError):
    """Integer label raster contains an index outside {0..K-1, 255}."""


class InvalidSpecError(UserInputError):
    """Scene specification violates its constraints (e.g. resolution < 8)."""


class DatasetIntegrityError(UserInputError):
    """Dataset directory is inconsistent (missing image/label counterpart)."""


class DatasetFormatError(UserInputError):
    """A dataset file exists but cannot be decoded."""


class EmptyDatasetError(UserInputError):
    """An operation that needs at least one item got an empty dataset."""


class ConfigError(UserInputError):
    """Run configuration file is malformed or has invalid values."""


class ContractError(StylelessError):
    """An operation was called with arguments violating its contract."""


class InvariantViolationError(StylelessError):
    """A structural invariant was violated (e.g. a forged translated label)."""


class NumericFailureError(StylelessError):
    """A computation produced non-finite values."""
