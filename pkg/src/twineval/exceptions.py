"""Exception types shared across the package."""


class TwinevalError(Exception):
    """Base class for all package errors."""


class ValidationError(TwinevalError):
    """An object violates its structural invariants.

    Carries the list of human-readable violation strings produced by the
    relevant ``validate`` routine.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IndexOutOfRangeError(TwinevalError):
    """A state or action index is outside the environment's range."""


class NotConvergedError(TwinevalError):
    """An iterative routine failed to reach its tolerance."""


class InfeasibleMassError(TwinevalError):
    """Source and target distributions carry different total mass."""


class ActionSpaceMismatchError(TwinevalError):
    """Two MDPs being compared do not share an action space."""


class DiscountMismatchError(TwinevalError):
    """Two MDPs being compared use different discount factors."""


class ShapeMismatchError(TwinevalError):
    """An identity state pairing is impossible for these shapes."""


class EmptyBatchError(TwinevalError):
    """A trajectory batch contains no samples."""


class SpecTooLargeError(TwinevalError):
    """An environment spec would exceed the transition-table budget."""


class EmptyPoolError(TwinevalError):
    """A selection was requested from an empty candidate pool."""


class DegenerateFitError(TwinevalError):
    """The bound-fitting constraints are infeasible."""


class MissingColumnError(TwinevalError):
    """A ledger is missing a column required by the requested output."""
