"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GenIntError(Exception):
    exit_code = 1


class ConfigError(GenIntError, ValueError):
    """Invalid configuration (window sizes, widths, fractions, ...)."""

    exit_code = 2


class DimensionError(GenIntError, ValueError):
    """Tensor shapes do not line up."""

    exit_code = 2


class ContractError(GenIntError, ValueError):
    """A precondition of an operation was violated."""

    exit_code = 2


class ParseError(GenIntError, ValueError):
    exit_code = 2


class NumericalError(GenIntError, ArithmeticError):
    """Non-finite values, divergence, or an op-count mismatch."""

    exit_code = 4


class FormatError(GenIntError, IOError):
    """Base class for malformed container files; ``code`` tells the kinds apart."""

    exit_code = 3
    code = "format"


class VersionError(FormatError):
    code = "version"


class PayloadError(FormatError):
    """Payload truncated or of unexpected length."""

    code = "payload"


class ChecksumError(FormatError):
    code = "checksum"


class ConsistencyError(FormatError):
    """Header fields disagree with the payload."""

    code = "consistency"
