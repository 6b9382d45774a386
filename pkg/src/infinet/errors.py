"""Exception hierarchy.

The CLI maps the three top-level families to exit codes:
:class:`ConfigError` -> 2, :class:`DataError` -> 3, :class:`NumericError` -> 4.
"""


class InfinetError(Exception):
    """Base class for all library errors."""


class ConfigError(InfinetError, ValueError):
    """Invalid experiment configuration or kernel specification."""


class DataError(InfinetError, ValueError):
    """Malformed, truncated or inconsistent input data."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class CsvFormatError(DataError):
    pass


class ChecksumError(DataError):
    pass


class FingerprintMismatchError(DataError):
    """A Gram matrix or model was produced by a different kernel spec."""


class NumericError(InfinetError, ArithmeticError):
    pass


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DegenerateInputError(NumericError, ValueError):
    """Input for which the kernel is undefined (e.g. zero vector under Step)."""


class NonPSDError(NumericError):
    def __init__(self, min_eigenvalue, tolerance):
        self.min_eigenvalue = float(min_eigenvalue)
        self.tolerance = float(tolerance)
        super().__init__(
            f"Gram matrix is not PSD: minimum eigenvalue {self.min_eigenvalue:.3e} "
            f"below -{self.tolerance:.3e}"
        )


class ClampWarning(RuntimeWarning):
    """A correlation was clamped into [-1, 1] by more than the silent tolerance."""
