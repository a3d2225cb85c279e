"""Exception hierarchy shared by every module."""


class JumpBsdeError(Exception):
    """Base class for library errors."""


class ConfigError(JumpBsdeError):
    """Invalid user input (maps to CLI exit code 2)."""


class NumericalError(JumpBsdeError):
    """A computation left its domain or diverged (maps to CLI exit code 3)."""


class InfiniteActivityMass(JumpBsdeError):
    pass


class QuadratureDivergence(NumericalError):
    pass


class EpsilonOutOfRange(ConfigError):
    pass


class FiniteActivityInput(ConfigError):
    pass


class ConstructionUnavailable(ConfigError):
    pass


class TapeMismatch(JumpBsdeError):
    pass


class UnsupportedActivation(ConfigError):
    pass


class NonFiniteState(NumericalError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class NonFiniteLoss(NumericalError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class PicardDivergence(NumericalError):
    pass


class GridMismatch(JumpBsdeError):
    pass


class ArgOutOfDomain(NumericalError):
    pass


class DenominatorNonpositive(NumericalError):
    pass


class Infeasible(NumericalError):
    pass


class NonpositiveX(ConfigError):
    pass
