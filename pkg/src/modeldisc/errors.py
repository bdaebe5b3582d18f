"""Exception types shared across the toolkit."""


class ModelDiscError(Exception):
    """Base class for all toolkit errors."""


class NonFiniteState(ModelDiscError):
    """A simulated state became NaN/Inf; carries the time of failure."""

    def __init__(self, time: float, message: str = ""):
        self.time = float(time)
        super().__init__(message or f"state became non-finite at t={time:.6g}")


class AlgebraicSolveFailed(ModelDiscError):
    """Newton iteration on the algebraic residual stagnated."""

    def __init__(self, time: float, residual: float):
        self.time = float(time)
        self.residual = float(residual)
        super().__init__(
            f"algebraic solve stagnated at t={time:.6g} (|g|={residual:.3e})"
        )


class DuplicateName(ModelDiscError):
    """A model with this name is already registered."""


class InvalidModel(ModelDiscError):
    """Model fails registration validation (shapes, consistency, index)."""


class DimensionMismatch(ModelDiscError):
    """Vector/matrix shapes do not agree with the declared dimensions."""


class EmptySamples(ModelDiscError):
    """Normalizer fitting requires at least two samples."""


class UnresolvedReference(ModelDiscError):
    """An expression leaf references a column absent from the row."""


class EmptyFront(ModelDiscError):
    """Selection from an empty Pareto front."""


class EngineerDecisionPending(ModelDiscError):
    """The 'engineer' selection strategy needs an explicit decision."""


class InvalidDecision(ModelDiscError):
    """Decision submitted at the wrong stage or with an unknown choice."""


class MissingDecision(ModelDiscError):
    """The session is at a decision point and no decision was supplied."""


class UnknownSession(ModelDiscError):
    """Session id not present in the store."""
