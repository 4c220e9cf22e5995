"""Exception hierarchy."""


class QSpamError(ValueError):
    """Base class for all package errors."""


class InvalidTarget(QSpamError):
    pass


class InvalidChannel(QSpamError):
    pass


class NonPhysicalState(QSpamError):
    pass


class UnsupportedSize(QSpamError):
    pass


class InvalidParams(QSpamError):
    pass


class WrongModelVariant(QSpamError):
    pass


class ImpossibleOutcome(QSpamError):
    pass


class DegenerateSolution(QSpamError):
    """Closed-form inversion hit a negative radicand or vanishing readout fidelity."""


class NoPhysicalSolution(QSpamError):
    """No restart of the iterative solver converged inside the physical bounds."""


class SingularInformation(QSpamError):
    pass


class NoCorrectionPossible(QSpamError):
    pass


class NonInvertibleConfusion(QSpamError):
    pass


class ConfigError(QSpamError):
    pass
