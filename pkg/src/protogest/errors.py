"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError (and CodecError) -> 2,
NumericalError -> 3, OSError -> 4.
"""


class ValidationError(ValueError):
    """Input data or configuration violates a documented invariant."""


class CodecError(Exception):
    """Corrupt or undecodable tensor file."""


class BadMagicError(CodecError):
    """File does not start with the expected magic bytes."""


class UnknownDtypeError(CodecError):
    """Dtype code in the header is not supported."""


class TruncatedError(CodecError):
    """File ends before the declared header or payload is complete."""


class TrailingDataError(CodecError):
    """File contains bytes beyond the declared payload."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class ContractError(AssertionError):
    """An internal calling contract was violated (caller bug)."""
