"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/format
errors exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (e.g. all-masked softmax)."""


class InputError(ValueError):
    """Caller supplied an invalid argument."""


class DataError(ValueError):
    """Corpus, vocabulary, or file-format problem."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required; training aborts on this."""
