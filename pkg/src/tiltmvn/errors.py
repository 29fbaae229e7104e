"""Exception hierarchy shared by all modules."""


class TiltError(Exception):
    """Base class for library errors."""


class DegenerateInterval(TiltError, ValueError):
    """A lower bound is not strictly below its upper bound."""


class RankDeficient(TiltError, ValueError):
    """The constraint matrix does not have full row rank."""


class NotPositiveDefinite(TiltError, ValueError):
    """A covariance matrix failed the symmetry or Cholesky check."""


class NoConvergence(TiltError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    ``best`` holds the best iterate found, when there is one.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EnvelopeViolation(TiltError, RuntimeError):
    """A proposal weight exceeded the accept-reject envelope."""


class BudgetExceeded(TiltError, RuntimeError):
    """The accept-reject sampler used up its proposal budget."""

    def __init__(self, message, proposals=0, accepted=0):
        super().__init__(message)
        self.proposals = proposals
        self.accepted = accepted


class CountOverflow(TiltError, OverflowError):
    """A sample-size formula produced a count outside the int64 range."""
