"""Error types raised across the package.

Data problems derive from ``ValueError`` and numerical problems from
``ArithmeticError`` so callers can catch them broadly, while the CLI maps the
two families onto distinct exit codes.
"""


class PrefStabError(Exception):
    """Root of all package errors."""


class ConfigError(PrefStabError, ValueError):
    pass


class DataError(PrefStabError, ValueError):
    pass


class NumericalError(PrefStabError, ArithmeticError):
    pass


class ZeroExpenditure(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NonPositiveScale(DataError):
    pass


class SchemaError(DataError):
    pass


class MissingPeriodPrice(DataError):
    pass


class NegativeExpenditure(DataError):
    pass


class MissingIncome(DataError):
    pass


class EmptyPool(DataError):
    pass


class SizeLimit(PrefStabError):
    pass


class ChecksumMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class EmptyThetaSet(PrefStabError, ValueError):
    pass


class NoSimilarPairFound(PrefStabError, ValueError):
    pass


class NotConverged(NumericalError):
    """The cone projection stopped at ``max_iter`` before meeting ``tol``.

    ``projection`` holds the best iterate so the caller can decide whether to
    use it.
    """

    def __init__(self, message, projection=None):
        super().__init__(message)
        self.projection = projection


class ReferenceCountMismatch(PrefStabError):
    pass
