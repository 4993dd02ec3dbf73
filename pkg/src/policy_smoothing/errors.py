"""Exception types raised across the package."""


class StepAfterDone(RuntimeError):
    """An environment was stepped after its episode ended."""


class DimMismatch(ValueError):
    pass


class NonFiniteGradient(ValueError):
    pass


class DivergedTraining(RuntimeError):
    """Training produced a non-finite loss."""


class BudgetExceeded(ValueError):
    """An adversarial offset would overspend the episode l2 budget."""


class InvalidSigma(ValueError):
    pass


class InvalidCounts(ValueError):
    pass


class EmptySamples(ValueError):
    pass


class UnboundedReward(ValueError):
    """Certification needs known finite reward bounds for the environment."""


class GridInfeasible(RuntimeError):
    """A grid adversary violates the episode budget by construction."""


class MissingCheckpoint(FileNotFoundError):
    pass


class BadConfig(ValueError):
    pass
