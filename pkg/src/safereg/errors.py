"""Exception hierarchy shared by all modules."""


class SaferegError(Exception):
    """Base class for all package errors."""


class DimensionError(SaferegError, ValueError):
    pass


class NumericalError(SaferegError, ArithmeticError):
    pass


class RankDeficiencyError(SaferegError):
    pass


class ConjugatePairingError(SaferegError):
    pass


class ConfigurationError(SaferegError, ValueError):
    pass


class SamplingWindowError(ConfigurationError):
    pass


class SimpleSpectrumError(SaferegError):
    """Repeated eigenvalues where a simple spectrum is required."""


class AliasingError(SaferegError):
    pass


class ClassificationError(SaferegError):
    pass


class DataInconsistencyError(SaferegError):
    pass


class DomainError(SaferegError, ValueError):
    pass


class SignAmbiguityError(SaferegError):
    """Barrier bounds straddle zero and no conservative fallback was allowed."""


class BoundaryCaseError(SaferegError):
    pass


class MissingConstantError(ConfigurationError):
    pass


class DesignError(SaferegError):
    pass
