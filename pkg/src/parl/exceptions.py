"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Raised when an operation's preconditions (shapes, sizes, ranges) are not met."""


class NumericalFault(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


class ParseError(ValueError):
    """Raised when a binary file cannot be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(ParseError):
    """Raised when a checkpoint carries an unsupported format version."""


class ConfigError(ValueError):
    """Raised for invalid experiment configuration."""
