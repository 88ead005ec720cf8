"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class FormatError(ValueError):
    """A file (WAV, manifest, checkpoint, config) could not be parsed."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""
