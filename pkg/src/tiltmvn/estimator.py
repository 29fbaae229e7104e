"""Separation-of-variables (SOV) and minimax-tilted (MET) probability estimators.

Both estimators draw sequential paths through the factored box and average
importance weights.  Points come from a randomised Richtmyer sequence split
into 12 independently shifted batches; the spread of the batch means gives
the reported relative error.  All weights stay on the log scale.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import CountOverflow
from .problem import FactoredProblem
from .special import log_mass, mass_and_quantile
from .tilting import TiltingSolution, solve_tilting

SCHEMA_VERSION = 1
N_BATCHES = 12
METHODS = ("SOV", "MET")
# floats per working block: bounds memory on wide problems
_CHUNK_FLOATS = 1 << 22
# coordinates per blocked update in the path recursion
_BLOCK = 32


def primes(count: int) -> np.ndarray:
    """The first ``count`` primes via a sieve of Eratosthenes."""
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    # p_k < k (log k + log log k) for k >= 6
    limit = 15 if count < 6 else int(count * (math.log(count) + math.log(math.log(count)))) + 1
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit**0.5) + 1):
        if sieve[p]:
            sieve[p * p :: p] = False
    return np.flatnonzero(sieve)[:count].astype(np.int64)


def _sieve_limit(d: int) -> int:
    return math.ceil(5 * d * math.log(d + 1) / 4)


def richtmyer_generators(dim: int, d: int | None = None) -> np.ndarray:
    """Square roots of the first ``dim`` primes.

    The primes are sieved up to ``ceil(5 d log(d + 1) / 4)`` and the list is
    extended when that limit holds fewer than ``dim`` of them.
    """
    d = dim + 1 if d is None else d
    limit = _sieve_limit(d)
    sieve = np.ones(max(limit, 2) + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit**0.5) + 1):
        if sieve[p]:
            sieve[p * p :: p] = False
    found = np.flatnonzero(sieve)
    if found.size < dim:
        found = primes(dim)
    return np.sqrt(found[:dim].astype(float))


def _batch_points(gen: np.ndarray, shift: np.ndarray, count: int, start: int = 1) -> np.ndarray:
    """Shifted, folded Richtmyer points, shape ``(len(gen), count)``."""
    k = np.arange(start, start + count, dtype=float)
    frac = np.mod(np.outer(gen, k) + shift[:, None], 1.0)
    return np.abs(2.0 * frac - 1.0)


def qmc_batches(d: int, n: int, seed=None):
    """Twelve randomised Richtmyer point sets in ``[0, 1]^(d - 1)``.

    Each batch holds ``ceil(n / 12)`` points as rows.  The shift is a fresh
    uniform per coordinate per batch.
    """
    if n < N_BATCHES:
        raise ValueError(f"n must be at least {N_BATCHES}, got {n}")
    per = -(-n // N_BATCHES)
    dim = d - 1
    gen = richtmyer_generators(dim, d)
    rng = np.random.default_rng(seed)
    shifts = rng.random((N_BATCHES, dim))
    return [_batch_points(gen, shifts[i], per).T for i in range(N_BATCHES)]


def sov_paths(fp: FactoredProblem, mu, U):
    """Vectorised sequential paths.

    ``U`` has shape ``(k, n)`` with ``k = m - 1`` or ``k = m``; column ``j`` is
    one point.  Returns ``(X, log_w)`` with ``X`` of shape ``(k, n)``.  When
    only ``m - 1`` coordinates are supplied, the last coordinate is integrated
    out exactly, contributing its untilted log mass.
    """
    m = fp.m
    mu = np.asarray(mu, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    k_dim, n = U.shape
    if k_dim not in (m - 1, m):
        raise ValueError(f"points need {m - 1} or {m} coordinates, got {k_dim}")
    X = np.empty((k_dim, n))
    logw = np.zeros(n)
    ls, us, unit = fp.lower_scaled, fp.upper_scaled, fp.unit
    with np.errstate(invalid="ignore"):
        for k0 in range(0, m, _BLOCK):
            k1 = min(m, k0 + _BLOCK)
            # contributions of earlier blocks in one matrix product
            base = unit[k0:k1, :k0] @ X[:k0] if k0 else np.zeros((k1 - k0, n))
            for k in range(k0, k1):
                off = base[k - k0] + unit[k, k0:k] @ X[k0:k] if k > k0 else base[0]
                a = ls[k] - off
                b = us[k] - off
                if k == k_dim:
                    logw += log_mass(a, b)
                    break
                lp, q = mass_and_quantile(a - mu[k], b - mu[k], U[k])
                X[k] = mu[k] + q
                logw += lp + 0.5 * mu[k] ** 2 - mu[k] * X[k]
    # paths whose interval emptied out carry zero weight
    logw = np.where(np.isnan(logw), -np.inf, logw)
    return X, logw


def sov_path(fp: FactoredProblem, mu, point):
    """Single path; see :func:`sov_paths`.  Returns ``(x, log_weight)``."""
    X, logw = sov_paths(fp, mu, np.asarray(point, dtype=float).reshape(-1, 1))
    return X[:, 0], float(logw[0])


@dataclass
class EstimateResult:
    method: str
    d: int
    m: int
    n_total: int
    log_mean_estimate: float
    rel_error: float
    log_upper_bound: float | None = None
    log_lower_bound: float | None = None
    worst_case_rel_error: float | None = None
    seed: int | None = None
    wall_time_ms: float = 0.0
    batch_log_means: np.ndarray = field(default=None, repr=False)

    @property
    def estimate(self) -> float:
        return math.exp(self.log_mean_estimate) if self.log_mean_estimate > -745 else 0.0

    @property
    def std_error(self) -> float:
        """Absolute standard error on the linear scale."""
        return self.estimate * self.rel_error

    def to_dict(self) -> dict:
        def lin(v):
            return None if v is None else math.exp(v)

        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "d": self.d,
            "m": self.m,
            "n": self.n_total,
            "log_estimate": self.log_mean_estimate,
            "estimate": lin(self.log_mean_estimate),
            "rel_error": self.rel_error,
            "log_upper_bound": self.log_upper_bound,
            "upper_bound": lin(self.log_upper_bound),
            "log_lower_bound": self.log_lower_bound,
            "lower_bound": lin(self.log_lower_bound),
            "worst_case_rel_error": self.worst_case_rel_error,
            "seed": self.seed,
            "wall_time_ms": self.wall_time_ms,
        }


def _batch_log_mean(fp, mu, gen, shift, per):
    m = fp.m
    chunk = max(1, _CHUNK_FLOATS // max(m, 1))
    parts = []
    for start in range(0, per, chunk):
        cnt = min(chunk, per - start)
        U = _batch_points(gen, shift, cnt, start + 1)
        parts.append(sov_paths(fp, mu, U)[1])
    w = np.concatenate(parts)
    return float(logsumexp(w) - math.log(per))


def aggregate(batch_log_means) -> tuple[float, float]:
    """Overall log mean and relative error from per-batch log means."""
    b = np.asarray(batch_log_means, dtype=float)
    k = b.size
    lbar = float(logsumexp(b) - math.log(k))
    if not np.isfinite(lbar):
        return lbar, math.inf
    dev = np.expm1(b - lbar)
    return lbar, float(np.sqrt(np.sum(dev**2)) / k)


def estimate(
    fp: FactoredProblem,
    method: str = "MET",
    n: int = 10_000,
    seed=None,
    *,
    tilt: TiltingSolution | None = None,
    log_lower: float | None = None,
    with_bounds: bool = True,
    threads: int = 1,
) -> EstimateResult:
    """Estimate ``P(l <= A Z <= u)`` by randomised QMC.

    ``MET`` shifts every coordinate by the saddle-point tilt, ``SOV`` uses no
    shift.  The saddle value is attached as a deterministic upper bound
    whenever the tilting problem is solved (always for ``MET``, for ``SOV``
    only if ``with_bounds``).
    """
    method = method.upper()
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if n < N_BATCHES:
        raise ValueError(f"n must be at least {N_BATCHES}, got {n}")
    t0 = time.perf_counter()
    m = fp.m
    if tilt is None and (method == "MET" or with_bounds):
        tilt = solve_tilting(fp)
    mu = tilt.mu_star if method == "MET" else np.zeros(m)
    per = -(-n // N_BATCHES)
    gen = richtmyer_generators(m - 1, m)
    rng = np.random.default_rng(seed)
    shifts = rng.random((N_BATCHES, m - 1))

    def run(i):
        return _batch_log_mean(fp, mu, gen, shifts[i], per)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            means = list(pool.map(run, range(N_BATCHES)))
    else:
        means = [run(i) for i in range(N_BATCHES)]
    lbar, rel = aggregate(means)
    upper = None if tilt is None else float(tilt.psi_star)
    worst = None
    if upper is not None and log_lower is not None and np.isfinite(log_lower):
        worst = float(np.expm1(upper - log_lower) / math.sqrt(per * N_BATCHES))
    return EstimateResult(
        method=method,
        d=fp.d,
        m=m,
        n_total=per * N_BATCHES,
        log_mean_estimate=lbar,
        rel_error=rel,
        log_upper_bound=upper,
        log_lower_bound=log_lower,
        worst_case_rel_error=worst,
        seed=seed,
        wall_time_ms=1000.0 * (time.perf_counter() - t0),
        batch_log_means=np.asarray(means),
    )


def hoeffding_n(psi_star: float, log_lower: float, eps: float, alpha: float = 0.05) -> int:
    """Sample size for an exact ``(1 - alpha)`` interval of half-width ``eps``.

    Passing ``log_lower = -inf`` uses zero as the lower bound.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if log_lower > psi_star:
        raise ValueError("log_lower must not exceed psi_star")
    if log_lower == psi_star:
        return 1
    # log of the envelope width exp(psi*) - l_L
    if np.isneginf(log_lower):
        log_gap = psi_star
    else:
        log_gap = psi_star + math.log(-math.expm1(log_lower - psi_star))
    log_n = math.log(-math.log(alpha / 2)) + 2 * log_gap - math.log(2.0) - 2 * math.log(eps)
    if log_n > math.log(np.iinfo(np.int64).max):
        raise CountOverflow(f"required sample size exp({log_n:.1f}) exceeds int64")
    return max(1, math.ceil(math.exp(log_n)))
