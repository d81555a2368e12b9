"""Exception hierarchy shared across the package."""


class GridChaseError(Exception):
    """Base class for every error raised by gridchase."""


class NetworkError(GridChaseError, ValueError):
    pass


class CycleDetected(NetworkError):
    pass


class DisconnectedBus(NetworkError):
    pass


class NonpositiveImpedance(NetworkError):
    pass


class DuplicateChild(NetworkError):
    pass


class AsymmetricInput(GridChaseError, ValueError):
    pass


class DimensionMismatch(GridChaseError, ValueError):
    pass


class SchemaError(GridChaseError, ValueError):
    pass


class NonFiniteValue(GridChaseError, ValueError):
    pass


class DomainError(GridChaseError, ValueError):
    pass


class DegenerateRange(DomainError):
    pass


class SolverFailure(GridChaseError, RuntimeError):
    pass


class InfeasibleConsistentSet(GridChaseError, RuntimeError):
    """No model is consistent with the selected observations.

    This means one of the modelling assumptions (noise bound, exogenous
    voltage box, uncertainty set) does not hold for the data.
    """


class SlackStageInfeasible(SolverFailure):
    pass


class AssumptionViolation(GridChaseError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
