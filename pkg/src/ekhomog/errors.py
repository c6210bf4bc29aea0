"""Exception hierarchy shared by all stages."""


class EkError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(EkError, ValueError):
    pass


class ValenceOrder(ValidationError):
    pass


class NonNeutral(ValidationError):
    pass


class NonPositive(ValidationError):
    pass


class InfeasibleConstraints(ValidationError):
    pass


class ResolutionTooCoarse(ValidationError):
    pass


class DisconnectedFluid(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


class InconsistentRhs(ValidationError):
    pass


class NonSpdTensor(ValidationError):
    pass


class MissingCellSolution(EkError, KeyError):
    pass


class NoConvergence(EkError, RuntimeError):
    """A solver stopped before reaching its tolerance.

    The attached ``report`` (a :class:`ekhomog.grid.SolveReport`) describes
    how far it got.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CutoffActive(EkError, RuntimeError):
    pass


class ConfigError(EkError, ValueError):
    pass


class UnknownKey(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class ConfigTypeError(ConfigError, TypeError):
    pass


class StageFailure(EkError, RuntimeError):
    def __init__(self, stage, realization, message, report=None):
        super().__init__(f"stage {stage!r} failed (realization {realization}): {message}")
        self.stage = stage
        self.realization = realization
        self.report = report
