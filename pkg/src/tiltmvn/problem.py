"""Truncation problems and their factorised, reordered canonical form."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import DegenerateInterval, NotPositiveDefinite, RankDeficient
from .special import log_mass, moments

RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TruncationProblem:
    """The target ``P(l <= A Z <= u)`` with ``Z ~ N(0, I_d)``.

    Build it with :meth:`from_matrix` (``A`` is ``m x d``) or
    :meth:`from_covariance` (``Sigma = A A^T`` is given and ``A`` is left
    implicit).  Exactly one of ``matrix`` and ``sigma`` is stored.
    """

    lower: np.ndarray
    upper: np.ndarray
    matrix: np.ndarray | None = None
    sigma: np.ndarray | None = None

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if (self.matrix is None) == (self.sigma is None):
            raise ValueError("give exactly one of matrix or sigma")
        if self.matrix is not None:
            mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            m, d = mat.shape
            if m > d:
                raise RankDeficient(f"A is {m}x{d}; need m <= d")
            object.__setattr__(self, "matrix", mat)
        else:
            sig = np.atleast_2d(np.asarray(self.sigma, dtype=float))
            if sig.shape[0] != sig.shape[1]:
                raise NotPositiveDefinite(f"covariance must be square, got {sig.shape}")
            scale = max(np.abs(sig).max(), 1e-300)
            if np.abs(sig - sig.T).max() > 1e-12 * scale:
                raise NotPositiveDefinite("covariance is not symmetric")
            sig = 0.5 * (sig + sig.T)
            m = sig.shape[0]
            object.__setattr__(self, "sigma", sig)
        if lower.shape != (m,) or upper.shape != (m,):
            raise ValueError(f"bounds must have length {m}")
        if np.isnan(lower).any() or np.isnan(upper).any():
            raise DegenerateInterval("bounds must not be NaN")
        if np.any(lower == np.inf) or np.any(upper == -np.inf):
            raise DegenerateInterval("lower bounds must be < inf and upper bounds > -inf")
        bad = np.flatnonzero(~(lower < upper))
        if bad.size:
            i = int(bad[0])
            raise DegenerateInterval(
                f"lower[{i}]={float(lower[i])!r} is not below upper[{i}]={float(upper[i])!r}"
            )
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_matrix(cls, A, lower, upper) -> "TruncationProblem":
        return cls(lower=lower, upper=upper, matrix=A)

    @classmethod
    def from_covariance(cls, sigma, lower, upper) -> "TruncationProblem":
        return cls(lower=lower, upper=upper, sigma=sigma)

    @property
    def m(self) -> int:
        return self.lower.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1] if self.matrix is not None else self.m

    @property
    def covariance(self) -> np.ndarray:
        """``Sigma = A A^T`` (``m x m``)."""
        if self.sigma is not None:
            return self.sigma
        return self.matrix @ self.matrix.T

    def permuted(self, perm) -> "TruncationProblem":
        perm = np.asarray(perm)
        if self.matrix is not None:
            return TruncationProblem.from_matrix(
                self.matrix[perm], self.lower[perm], self.upper[perm]
            )
        return TruncationProblem.from_covariance(
            self.sigma[np.ix_(perm, perm)], self.lower[perm], self.upper[perm]
        )

    def with_free_coordinates(self, k: int) -> "TruncationProblem":
        """Same constraints with ``k`` extra unconstrained columns appended to ``A``."""
        A = self.matrix if self.matrix is not None else np.linalg.cholesky(self.sigma)
        A = np.hstack([A, np.zeros((self.m, k))])
        return TruncationProblem.from_matrix(A, self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class FactoredProblem:
    """Reordered factorisation ``P A = L Q_1^T`` consumed by every algorithm.

    ``lower``/``upper`` are the permuted bounds ``P l``, ``P u``.  ``Q`` is the
    full ``d x d`` orthonormal factor whose first ``m`` columns are ``Q_1``;
    it is ``None`` when the problem came from a covariance matrix, in which
    case ``A`` is taken to be ``P^T L`` and ``z = x``.
    """

    L: np.ndarray
    perm: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    Q: np.ndarray | None
    problem: TruncationProblem
    diag: np.ndarray = field(init=False)
    unit: np.ndarray = field(init=False)

    def __post_init__(self):
        L = self.L
        diag = np.diag(L).copy()
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "unit", L / diag[:, None])
        for name in ("L", "perm", "lower", "upper", "diag", "unit"):
            getattr(self, name).setflags(write=False)
        if self.Q is not None:
            self.Q.setflags(write=False)

    @property
    def m(self) -> int:
        return self.L.shape[0]

    @property
    def d(self) -> int:
        return self.problem.d

    @property
    def free_dims(self) -> int:
        return self.d - self.m

    @property
    def lower_scaled(self) -> np.ndarray:
        """``P l / D``; infinities pass through."""
        return self.lower / self.diag

    @property
    def upper_scaled(self) -> np.ndarray:
        return self.upper / self.diag

    def intervals(self, x):
        """Sequential per-coordinate bounds ``(l~(x), u~(x))``.

        ``x`` has shape ``(m,)`` or ``(m, n)`` (one column per point).
        """
        x = np.asarray(x, dtype=float)
        off = (self.unit - np.eye(self.m)) @ x
        if x.ndim == 2:
            return self.lower_scaled[:, None] - off, self.upper_scaled[:, None] - off
        return self.lower_scaled - off, self.upper_scaled - off

    def to_standard(self, x, free=None):
        """Map constrained coordinates ``x`` (``n x m``) to ``z`` (``n x d``)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.Q is None:
            return x.copy()
        n = x.shape[0]
        if free is None:
            free = np.zeros((n, self.free_dims))
        full = np.hstack([x, np.asarray(free, dtype=float).reshape(n, self.free_dims)])
        return full @ self.Q.T

    def to_constraint_space(self, x):
        """``A z = P^T L x`` for constrained coordinates ``x`` (``n x m``)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        out[:, self.perm] = x @ self.L.T
        return out

    def residual(self) -> float:
        """Relative factorisation residual ``||L Q_1^T - P A|| / ||A||``."""
        pa = self.problem.permuted(self.perm)
        if self.Q is None:
            ref = pa.sigma
            rec = self.L @ self.L.T
        else:
            ref = pa.matrix
            rec = self.L @ self.Q[:, : self.m].T
        return float(np.linalg.norm(rec - ref) / max(np.linalg.norm(ref), 1e-300))


def _greedy_cholesky(sigma, lower, upper, reorder: bool):
    """Cholesky of ``P Sigma P^T`` with the greedy ordering applied on the fly.

    At step ``k`` the remaining variable with the smallest conditional
    interval probability is moved to position ``k``; conditioning uses the
    truncated means of the variables already placed.
    """
    sig = np.array(sigma, dtype=float)
    lo = np.array(lower, dtype=float)
    hi = np.array(upper, dtype=float)
    m = sig.shape[0]
    perm = np.arange(m)
    L = np.zeros((m, m))
    y = np.zeros(m)
    diag_sig = np.diag(sig).copy()
    tol = RANK_TOL * max(diag_sig.max(), 1e-300)
    for k in range(m):
        if reorder and k < m - 1:
            rest = slice(k, m)
            var = diag_sig[rest] - np.einsum("ij,ij->i", L[rest, :k], L[rest, :k])
            cond = L[rest, :k] @ y[:k]
            ok = var > tol
            if not ok.any():
                raise RankDeficient(f"no positive pivot left at step {k}")
            s = np.sqrt(np.where(ok, var, 1.0))
            lp = log_mass((lo[rest] - cond) / s, (hi[rest] - cond) / s)
            lp = np.where(ok, lp, np.inf)
            best = lp.min()
            ties = np.flatnonzero(lp == best)
            j = k + int(ties[np.argmin(perm[k + ties])])
            if j != k:
                swap = [k, j]
                back = [j, k]
                sig[swap, :] = sig[back, :]
                sig[:, swap] = sig[:, back]
                L[swap, :] = L[back, :]
                lo[swap] = lo[back]
                hi[swap] = hi[back]
                perm[swap] = perm[back]
                diag_sig[swap] = diag_sig[back]
        piv = sig[k, k] - L[k, :k] @ L[k, :k]
        if not piv > tol:
            raise RankDeficient(f"pivot {piv:.3e} at step {k} is below tolerance {tol:.3e}")
        L[k, k] = math.sqrt(piv)
        if k + 1 < m:
            L[k + 1 :, k] = (sig[k + 1 :, k] - L[k + 1 :, :k] @ L[k, :k]) / L[k, k]
        a = (lo[k] - L[k, :k] @ y[:k]) / L[k, k]
        b = (hi[k] - L[k, :k] @ y[:k]) / L[k, k]
        y[k] = moments(a, b)[0]
    return perm, L


def reorder_heuristic(problem: TruncationProblem) -> np.ndarray:
    """Greedy variable ordering (0-based permutation of the ``m`` constraints)."""
    perm, _ = _greedy_cholesky(problem.covariance, problem.lower, problem.upper, True)
    return perm


def factorize(problem: TruncationProblem, reorder: bool = True, perm=None) -> FactoredProblem:
    """Factor the (optionally reordered) problem.

    ``perm`` forces a specific ordering and overrides ``reorder``.
    """
    m = problem.m
    if perm is not None:
        perm = np.asarray(perm, dtype=int)
        if sorted(perm.tolist()) != list(range(m)):
            raise ValueError("perm is not a permutation of 0..m-1")
        pp = problem.permuted(perm)
        _, L = _greedy_cholesky(pp.covariance, pp.lower, pp.upper, False)
    else:
        if problem.sigma is not None:
            try:
                np.linalg.cholesky(problem.sigma)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite("covariance is not positive definite") from exc
        perm, L = _greedy_cholesky(problem.covariance, problem.lower, problem.upper, reorder)
    lower = problem.lower[perm]
    upper = problem.upper[perm]
    Q = None
    if problem.matrix is not None:
        pa = problem.matrix[perm]
        q, r = linalg.qr(pa.T, mode="full")
        rd = np.diag(r)
        if np.abs(rd).min() <= RANK_TOL * np.abs(rd).max():
            raise RankDeficient("A does not have full row rank")
        signs = np.sign(rd)
        L = (r[:m, :] * signs[:, None]).T
        q = q.copy()
        q[:, :m] *= signs
        Q = q
    return FactoredProblem(L=L, perm=np.asarray(perm), lower=lower, upper=upper, Q=Q,
                           problem=problem)


def parse_bounds(text: str) -> np.ndarray:
    """Parse ``"-inf,0,1.5"`` style bound lists."""
    return np.array([float(tok) for tok in text.replace(";", ",").split(",") if tok.strip()])


def read_matrix_csv(path) -> np.ndarray:
    """Read a numeric CSV (optional header row; ``inf``/``-inf`` allowed)."""
    rows = []
    with open(Path(path), newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            cells = [c.strip() for c in row if c.strip()]
            if not cells:
                continue
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                if i == 0 and not rows:
                    continue
                raise
    if not rows:
        raise ValueError(f"{path}: no numeric rows")
    return np.array(rows, dtype=float)


def read_vector_csv(path) -> np.ndarray:
    return read_matrix_csv(path).ravel()
