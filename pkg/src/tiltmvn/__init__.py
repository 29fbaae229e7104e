"""Minimax-tilted estimation and exact sampling for truncated multivariate normals."""
from .bounds import lower_bound, solve_tail_qp, tail_asymptotic
from .errors import (
    BudgetExceeded,
    CountOverflow,
    DegenerateInterval,
    EnvelopeViolation,
    NoConvergence,
    NotPositiveDefinite,
    RankDeficient,
    TiltError,
)
from .estimator import EstimateResult, estimate, hoeffding_n
from .problem import FactoredProblem, TruncationProblem, factorize
from .sampler import SampleBatch, sample, sample_covariance_form
from .tilting import TiltingSolution, solve_tilting

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded", "CountOverflow", "DegenerateInterval", "EnvelopeViolation",
    "EstimateResult", "FactoredProblem", "NoConvergence", "NotPositiveDefinite",
    "RankDeficient", "SampleBatch", "TiltError", "TiltingSolution", "TruncationProblem",
    "estimate", "factorize", "hoeffding_n", "lower_bound", "sample",
    "sample_covariance_form", "solve_tail_qp", "solve_tilting", "tail_asymptotic",
]
