"""Exact posterior simulation for Bayesian probit regression.

With latent ``lambda ~ N(0, I_m)`` the posterior of ``beta`` is the marginal
of a truncated normal in ``z = (V^{-1/2} beta, lambda)`` restricted to
``Xt V^{1/2} z_1 - lambda >= 0``, where ``Xt = diag(2y - 1) X``.  Accept-reject
draws of ``z`` therefore give i.i.d. posterior draws ``beta = V^{1/2} z_1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NotPositiveDefinite
from .problem import TruncationProblem, factorize
from .sampler import DEFAULT_MAX_PROPOSALS, sample
from .tilting import solve_tilting

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


def sym_sqrt(V) -> np.ndarray:
    """Symmetric square root of an SPD matrix via its eigendecomposition."""
    V = np.asarray(V, dtype=float)
    if not np.allclose(V, V.T, rtol=0, atol=1e-12 * max(1.0, np.abs(V).max())):
        raise NotPositiveDefinite("prior covariance is not symmetric")
    w, U = np.linalg.eigh(V)
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise NotPositiveDefinite("prior covariance is not positive definite")
    return (U * np.sqrt(w)) @ U.T


@dataclass
class ProbitModel:
    y: np.ndarray
    X: np.ndarray
    V: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        m, k = self.X.shape
        if self.y.size != m:
            raise ValueError(f"{self.y.size} responses for {m} design rows")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("responses must be 0 or 1")
        if np.linalg.matrix_rank(self.X) < k:
            raise ValueError("design matrix does not have full column rank")
        if self.V is None:
            self.V = 5.0 * np.eye(k)
        self.V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if self.V.shape != (k, k):
            raise ValueError(f"prior covariance must be {k}x{k}")
        if not self.names:
            self.names = [f"beta{i}" for i in range(k)]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def signed_design(self) -> np.ndarray:
        return (2.0 * self.y - 1.0)[:, None] * self.X


def build_problem(model: ProbitModel) -> TruncationProblem:
    """``A = [Xt V^{1/2}, -I]``, ``l = 0``, ``u = inf``."""
    root = sym_sqrt(model.V)
    A = np.hstack([model.signed_design @ root, -np.eye(model.m)])
    return TruncationProblem.from_matrix(A, np.zeros(model.m), np.full(model.m, np.inf))


@dataclass
class PosteriorDraws:
    beta_samples: np.ndarray
    acceptance_rate: float
    proposals_used: int
    names: list[str]
    seed: int | None = None

    def summary(self) -> dict:
        qs = np.percentile(self.beta_samples, QUANTILES, axis=0)
        out = {}
        for j, name in enumerate(self.names):
            col = self.beta_samples[:, j]
            out[name] = {
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
                **{f"q{q:g}": float(qs[i, j]) for i, q in enumerate(QUANTILES)},
            }
        return out


def sample_posterior(model: ProbitModel, n: int, seed=None, *, reorder: bool = True,
                     max_proposals: int = DEFAULT_MAX_PROPOSALS) -> PosteriorDraws:
    """``n`` exact i.i.d. draws from ``p(beta | y)``."""
    prob = build_problem(model)
    fp = factorize(prob, reorder=reorder)
    tilt = solve_tilting(fp)
    batch = sample(fp, tilt, n, seed, max_proposals=max_proposals)
    beta = batch.samples[:, : model.k] @ sym_sqrt(model.V)
    return PosteriorDraws(beta_samples=beta, acceptance_rate=batch.acceptance_rate,
                          proposals_used=batch.proposals_used, names=list(model.names),
                          seed=seed)


def load_csv(path, response: str, prior_scale: float = 5.0) -> ProbitModel:
    """Read a headed CSV; ``response`` is the 0/1 column, the rest are covariates.

    An intercept column is prepended.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or response not in reader.fieldnames:
            raise ValueError(f"response column {response!r} not found in {path}")
        covs = [c for c in reader.fieldnames if c != response]
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has no data rows")
    y = np.array([float(r[response]) for r in rows])
    X = np.array([[1.0] + [float(r[c]) for c in covs] for r in rows])
    k = X.shape[1]
    return ProbitModel(y=y, X=X, V=prior_scale * np.eye(k), names=["intercept", *covs])
