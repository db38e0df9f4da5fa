"""Exception hierarchy shared by every module."""


class OAFuserError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(OAFuserError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(OAFuserError, ValueError):
    """A configuration value is invalid."""


class FormatError(OAFuserError, ValueError):
    """An on-disk file is missing or malformed."""


class UsageError(OAFuserError):
    """An API or command line was used incorrectly."""


class DegenerateBatchError(OAFuserError, ValueError):
    """A batch contributes nothing to the loss (every pixel ignored)."""


class NonFiniteError(OAFuserError, FloatingPointError):
    """An operation produced NaN or Inf from finite inputs.

    ``op`` holds the label of the first offending operation.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
