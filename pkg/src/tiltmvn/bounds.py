"""Deterministic lower bound, tail quadratic program and tail asymptotics.

The lower bound is the Jensen (cross-entropy) bound obtained from a product
of independent truncated normals with free locations and scales.  Any
parameter value gives a valid bound, so the optimiser only has to improve it.

For tail problems ``P(X >= gamma p)`` the quadratic program
``min |x|^2 / 2 s.t. L x >= gamma p`` identifies the dominating constraints
and yields the classical asymptotic expansion of the probability.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg, optimize

from .errors import NoConvergence, NotPositiveDefinite
from .estimator import estimate
from .problem import FactoredProblem, TruncationProblem, factorize
from .special import log_mass, moments
from .tilting import solve_tilting

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
_FD_STEP = 1e-6


@dataclass
class LowerBoundSolution:
    nu: np.ndarray
    sigma: np.ndarray
    log_lower: float
    converged: bool = True


def _coordinate_terms(nu, s, lo, hi):
    """Per-coordinate mean, variance and entropy of the truncated product law."""
    sig = np.exp(s)
    with np.errstate(invalid="ignore", over="ignore"):
        a = (lo - nu) / sig
        b = (hi - nu) / sig
    lp = log_mass(a, b)
    p, dp = moments(a, b)
    mean = nu + sig * p
    var = sig * sig * (1.0 + dp)
    ent = 0.5 * (dp + p * p) + 0.5 * (LOG_2PI + 1.0) + s + lp
    return mean, var, ent


def _lower_objective(L, lo, hi):
    m = L.shape[0]
    Linv = linalg.solve_triangular(L, np.eye(m), lower=True)
    prec_diag = (Linv**2).sum(axis=0)
    const = -0.5 * m * LOG_2PI - np.log(np.diag(L)).sum()

    def value_parts(nu, s):
        mean, var, ent = _coordinate_terms(nu, s, lo, hi)
        y = Linv @ mean
        f = const - 0.5 * prec_diag @ var - 0.5 * y @ y + ent.sum()
        return f, mean, y

    def fun(theta):
        nu, s = theta[:m], theta[m:]
        f, mean, y = value_parts(nu, s)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(theta)
        # every term is separable except the quadratic in the mean, so
        # coordinate-wise central differences give the full gradient
        h = _FD_STEP
        Py = Linv.T @ y
        grads = []
        for shift_nu, shift_s in ((h, 0.0), (0.0, h)):
            mp_, vp, ep = _coordinate_terms(nu + shift_nu, s + shift_s, lo, hi)
            mm, vm, em = _coordinate_terms(nu - shift_nu, s - shift_s, lo, hi)
            dm = (mp_ - mm) / (2 * h)
            dv = (vp - vm) / (2 * h)
            de = (ep - em) / (2 * h)
            grads.append(-0.5 * prec_diag * dv + de - Py * dm)
        g = np.concatenate(grads)
        if not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(theta)
        return -f, -g

    return fun, value_parts


def lower_bound(problem: TruncationProblem, fp: FactoredProblem | None = None,
                *, max_iter: int = 500) -> LowerBoundSolution:
    """Maximise the cross-entropy lower bound on ``log P(l <= A Z <= u)``.

    Works on the covariance ``A A^T`` of the constrained coordinates, which
    must be full rank.  The returned bound is valid even if the optimiser
    stops early (``converged`` is then False).
    """
    if fp is None:
        fp = factorize(problem)
    L = np.asarray(fp.L)
    lo, hi = np.asarray(fp.lower), np.asarray(fp.upper)
    m = fp.m
    fun, parts = _lower_objective(L, lo, hi)
    sd = np.sqrt((L**2).sum(axis=1))
    theta0 = np.concatenate([np.zeros(m), np.log(sd)])
    res = optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-9})
    theta = res.x if np.isfinite(res.fun) and res.fun <= fun(theta0)[0] else theta0
    value = parts(theta[:m], theta[m:])[0]
    nu = np.empty(m)
    sigma = np.empty(m)
    nu[fp.perm] = theta[:m]
    sigma[fp.perm] = np.exp(theta[m:])
    if not res.success:
        log.info("lower bound optimiser stopped early: %s", res.message)
    return LowerBoundSolution(nu=nu, sigma=sigma, log_lower=float(value),
                              converged=bool(res.success))


@dataclass
class TailProgram:
    gamma: float
    p: np.ndarray
    x_qp: np.ndarray
    lam: np.ndarray
    active: np.ndarray
    inactive: np.ndarray
    L11: np.ndarray
    L21: np.ndarray
    L22: np.ndarray
    q: np.ndarray
    J: np.ndarray
    iterations: int = 0

    @property
    def d1(self) -> int:
        return int(self.active.size)

    @property
    def d2(self) -> int:
        return int(self.inactive.size)

    @property
    def weights(self) -> np.ndarray:
        """``L11^-T L11^-1 p1``, i.e. the active multipliers divided by gamma."""
        y = linalg.solve_triangular(self.L11, self.p[self.active], lower=True)
        return linalg.solve_triangular(self.L11.T, y, lower=False)

    @property
    def minimum(self) -> float:
        y = linalg.solve_triangular(self.L11, self.p[self.active], lower=True)
        return 0.5 * self.gamma**2 * float(y @ y)


def _covariance_of(source):
    if isinstance(source, FactoredProblem):
        return source.L @ source.L.T
    if isinstance(source, TruncationProblem):
        return source.covariance
    return np.asarray(source, dtype=float)


def _active_set_qp(G, h, max_pivots):
    """Primal active-set method for ``min |x|^2/2 s.t. G x >= h``, ``G`` square.

    Starts from the vertex where every constraint is active.
    """
    d = G.shape[0]
    x = linalg.solve(G, h)
    work = list(range(d))
    lam = np.zeros(d)
    for it in range(max_pivots):
        Gw = G[work]
        if work:
            # projection of -x onto the null space of the working rows
            coef = np.linalg.lstsq(Gw @ Gw.T, Gw @ x, rcond=None)[0]
            step = -x + Gw.T @ coef
        else:
            step = -x
        scale = 1.0 + np.abs(x).max()
        if np.abs(step).max() <= 1e-13 * scale:
            lam_w = np.linalg.lstsq(Gw.T, x, rcond=None)[0] if work else np.zeros(0)
            if lam_w.size == 0 or lam_w.min() >= -1e-12 * scale:
                lam[:] = 0.0
                lam[work] = np.maximum(lam_w, 0.0)
                return x, lam, it
            work.pop(int(np.argmin(lam_w)))
            continue
        Gs = G @ step
        slack = G @ x - h
        alpha, block = 1.0, None
        for i in range(d):
            if i in work or Gs[i] >= 0:
                continue
            t = slack[i] / -Gs[i]
            if t < alpha:
                alpha, block = t, i
        x = x + max(alpha, 0.0) * step
        if block is not None:
            work.append(block)
    raise NoConvergence(f"active-set QP did not finish in {max_pivots} pivots")


def solve_tail_qp(cov, gamma: float, p, *, max_pivots: int | None = None) -> TailProgram:
    """Solve ``min |x|^2/2 s.t. L x >= gamma p`` and split active/inactive blocks.

    ``cov`` is a covariance matrix, a :class:`TruncationProblem` or a
    :class:`FactoredProblem` (its ``L L^T``, with ``p`` in factored order).
    The factor of the covariance re-permuted so the active constraints come
    first provides ``L11``, ``L21`` and ``L22``.
    """
    sigma = _covariance_of(cov)
    p = np.asarray(p, dtype=float)
    if gamma <= 0 or np.any(p <= 0):
        raise ValueError("the tail program needs gamma > 0 and p > 0")
    d = p.size
    try:
        L = linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("covariance is not positive definite") from exc
    x, lam, iters = _active_set_qp(L, gamma * p, max_pivots or 10 * d + 10)
    # multipliers at rounding level belong to weakly active constraints
    lam_tol = 1e-12 * max(1.0, float(np.abs(lam).max()))
    active = np.flatnonzero(lam > lam_tol)
    inactive = np.flatnonzero(lam <= lam_tol)
    order = np.concatenate([active, inactive])
    Lp = linalg.cholesky(sigma[np.ix_(order, order)], lower=True)
    d1 = active.size
    L11, L21, L22 = Lp[:d1, :d1], Lp[d1:, :d1], Lp[d1:, d1:]
    p1, p2 = p[active], p[inactive]
    q = L21 @ linalg.solve_triangular(L11, p1, lower=True) - p2
    J = np.flatnonzero(np.abs(q) <= 1e-8 * gamma * np.linalg.norm(p))
    x_qp = np.zeros(d)
    x_qp[:d1] = gamma * linalg.solve_triangular(L11, p1, lower=True)
    lam_perm = lam[order]
    return TailProgram(gamma=float(gamma), p=p, x_qp=x_qp, lam=lam_perm, active=active,
                       inactive=inactive, L11=L11, L21=L21, L22=L22, q=q, J=J,
                       iterations=iters)


def qp_kkt_residual(tp: TailProgram) -> float:
    """Max violation of the KKT conditions in the active-first ordering."""
    order = np.concatenate([tp.active, tp.inactive])
    d1 = tp.d1
    L = np.zeros((order.size, order.size))
    L[:d1, :d1] = tp.L11
    L[d1:, :d1] = tp.L21
    L[d1:, d1:] = tp.L22
    pp = tp.p[order]
    r = L @ tp.x_qp - tp.gamma * pp
    stat = tp.x_qp - L.T @ tp.lam
    scale = max(1.0, tp.gamma * np.abs(pp).max())
    return float(max(np.abs(stat).max(), max(0.0, -r.min()), max(0.0, -tp.lam.min()),
                     abs(tp.lam @ r)) / scale)


def tail_asymptotic(cov, gamma: float, p, tp: TailProgram | None = None, *,
                    n: int = 10_000, seed=0) -> float:
    """Log of the leading-order tail approximation of ``P(X >= gamma p)``.

    When some inactive constraints are exactly degenerate, the orthant
    probability in the constant is itself estimated with the tilted
    estimator.
    """
    if tp is None:
        tp = solve_tail_qp(cov, gamma, p)
    w = tp.weights
    y = linalg.solve_triangular(tp.L11, tp.p[tp.active], lower=True)
    log_c = -0.5 * tp.d1 * LOG_2PI - np.log(np.diag(tp.L11)).sum()
    if tp.J.size:
        cov_y = (tp.L22 @ tp.L22.T)[np.ix_(tp.J, tp.J)]
        k = tp.J.size
        if k == 1:
            log_c += math.log(0.5)
        else:
            sub = TruncationProblem.from_covariance(cov_y, np.zeros(k), np.full(k, np.inf))
            log_c += estimate(factorize(sub), "MET", n, seed, with_bounds=False).log_mean_estimate
    return float(-0.5 * gamma**2 * (y @ y) - np.log(gamma * w).sum() + log_c)


def mills_ratio_approx(sigma, l_star, gamma: float) -> float:
    """Log of ``phi(gamma Sigma l*; 0, Sigma) / prod(gamma l*_k)``."""
    sigma = np.asarray(sigma, dtype=float)
    l_star = np.asarray(l_star, dtype=float)
    x = gamma * sigma @ l_star
    d = x.size
    _, logdet = np.linalg.slogdet(sigma)
    quad = gamma * x @ l_star
    return float(-0.5 * d * LOG_2PI - 0.5 * logdet - 0.5 * quad - np.log(gamma * l_star).sum())


@dataclass
class VreRow:
    gamma: float
    met_rel_err: float
    sov_rel_err: float
    log_psi_star: float
    log_estimate: float
    ratio: float
    log_asymptote: float | None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def vre_diagnostic(family: Callable[[float], TruncationProblem], gammas, n: int = 10_000,
                   seed=0, *, asymptote: bool = True) -> list[VreRow]:
    """Tilted versus plain estimator along a tail family.

    ``ratio`` is ``exp(psi*) / estimate``; under vanishing relative error it
    falls toward one as gamma grows.
    """
    gammas = [float(g) for g in gammas]
    if any(g <= 0 for g in gammas):
        raise ValueError("gamma must be positive: there is no tail direction at gamma <= 0")
    rows = []
    for g in gammas:
        prob = family(g)
        fp = factorize(prob)
        tilt = solve_tilting(fp)
        met = estimate(fp, "MET", n, seed, tilt=tilt)
        sov = estimate(fp, "SOV", n, seed, tilt=tilt)
        lasym = None
        if asymptote and np.all(np.isinf(prob.upper)) and np.all(prob.lower > 0) and prob.m == prob.d:
            lasym = tail_asymptotic(prob.covariance, 1.0, prob.lower)
        rows.append(VreRow(g, met.rel_error, sov.rel_error, tilt.psi_star,
                           met.log_mean_estimate,
                           float(np.exp(tilt.psi_star - met.log_mean_estimate)), lasym))
    return rows
