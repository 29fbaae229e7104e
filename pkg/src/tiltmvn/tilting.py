"""Minimax exponential tilting: the saddle point of the log likelihood ratio.

``psi(x; mu)`` is the log importance weight of a point ``x`` under the
sequentially tilted proposal with shift ``mu``.  It is concave in ``x`` and
convex in ``mu``; the saddle point ``(x*, mu*)`` gives the proposal shift
and ``exp(psi*)``, which bounds every weight from above.

The interior saddle solves ``grad psi = 0`` (Powell dogleg on the ``2m``
system with the analytic Hessian).  A log-barrier method on the reduced
concave problem ``max_x min_mu psi`` serves as a fallback when the dogleg
iteration does not converge or lands outside the feasible set.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInterval, NoConvergence
from .problem import FactoredProblem
from .special import log_mass, moments

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9
KKT_TOL = 1e-8


class HessianBlocks(NamedTuple):
    """Second derivatives of ``psi``.

    ``mu_x[i, j]`` is ``d^2 psi / d mu_i d x_j``.
    """

    mu_mu: np.ndarray
    mu_x: np.ndarray
    x_x: np.ndarray

    def full(self) -> np.ndarray:
        """Symmetric ``2m x 2m`` Jacobian of ``(d psi/dx, d psi/dmu)``."""
        return np.block([[self.x_x, self.mu_x.T], [self.mu_x, self.mu_mu]])


@dataclass(frozen=True, eq=False)
class TiltingSolution:
    x_star: np.ndarray
    mu_star: np.ndarray
    psi_star: float
    grad_norm: float
    eta_upper: np.ndarray
    eta_lower: np.ndarray
    iterations: int
    used_fallback: bool

    def diagnostics(self) -> dict:
        out = asdict(self)
        for key in ("x_star", "mu_star", "eta_upper", "eta_lower"):
            out.pop(key)
        return out


def _shifted(fp: FactoredProblem, x, mu):
    a, b = fp.intervals(x)
    lo = a - mu
    hi = b - mu
    if not np.all(lo < hi):
        k = int(np.flatnonzero(~(lo < hi))[0])
        raise DegenerateInterval(f"coordinate {k}: sequential interval is empty at this x")
    return lo, hi


def psi(fp: FactoredProblem, x, mu) -> float:
    """Log likelihood ratio ``-x.mu + |mu|^2/2 + sum_k log P_k``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    lo, hi = _shifted(fp, x, mu)
    return float(-x @ mu + 0.5 * mu @ mu + log_mass(lo, hi).sum())


def grad_psi(fp: FactoredProblem, x, mu):
    """``(d psi/dx, d psi/dmu)``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    lo, hi = _shifted(fp, x, mu)
    p, _ = moments(lo, hi)
    gx = -mu + fp.unit.T @ p - p
    gmu = mu - x + p
    return gx, gmu


def hess_blocks(fp: FactoredProblem, x, mu) -> HessianBlocks:
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    lo, hi = _shifted(fp, x, mu)
    _, dp = moments(lo, hi)
    return _blocks(fp, dp)


def _blocks(fp, dp):
    m = fp.m
    strict = fp.unit - np.eye(m)
    scaled = dp[:, None] * strict
    return HessianBlocks(
        mu_mu=np.eye(m) + np.diag(dp),
        mu_x=scaled - np.eye(m),
        x_x=strict.T @ scaled,
    )


def _system(fp, v):
    """Gradient, moments and log masses at the stacked point ``v = (x, mu)``."""
    m = fp.m
    x, mu = v[:m], v[m:]
    a, b = fp.intervals(x)
    lo, hi = a - mu, b - mu
    if not np.all(lo < hi):
        return None
    lp = log_mass(lo, hi)
    p, dp = moments(lo, hi, lp)
    F = np.concatenate([-mu + fp.unit.T @ p - p, mu - x + p])
    if not np.all(np.isfinite(F)) or not np.all(np.isfinite(dp)):
        return None
    return F, dp


def _newton_step(blocks: HessianBlocks, F, m):
    """Solve ``J s = -F`` through the Schur complement of the diagonal mu-block."""
    dmu = np.diag(blocks.mu_mu)
    B = blocks.mu_x
    Fx, Fm = F[:m], F[m:]
    S = blocks.x_x - B.T @ (B / dmu[:, None])
    try:
        sx = np.linalg.solve(S, -Fx + B.T @ (Fm / dmu))
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(blocks.full(), -F, rcond=None)[0]
    smu = (-Fm - B @ sx) / dmu
    return np.concatenate([sx, smu])


def initial_point(fp: FactoredProblem):
    """Sequential truncated means with zero tilt; strictly feasible."""
    m = fp.m
    x = np.zeros(m)
    for k in range(m):
        off = fp.unit[k, :k] @ x[:k]
        a = fp.lower_scaled[k] - off
        b = fp.upper_scaled[k] - off
        x[k] = moments(a, b)[0]
    return x, np.zeros(m)


def _dogleg(fp, v, max_iter, tol):
    m = fp.m
    out = _system(fp, v)
    if out is None:
        raise DegenerateInterval("starting point has an empty sequential interval")
    F, dp = out
    radius = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        if np.abs(F).max() <= tol:
            return v, F, it - 1
        blocks = _blocks(fp, dp)
        J = blocks.full()
        sn = _newton_step(blocks, F, m)
        nn = np.linalg.norm(sn)
        if nn <= radius:
            step = sn
        else:
            g = J.T @ F
            Jg = J @ g
            gg = g @ g
            sc = -(gg / (Jg @ Jg)) * g
            nc = np.linalg.norm(sc)
            if nc >= radius:
                step = -radius * g / np.sqrt(gg)
            else:
                diff = sn - sc
                qa = diff @ diff
                qb = 2 * sc @ diff
                qc = nc * nc - radius * radius
                tau = (-qb + np.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)
                step = sc + tau * diff
        ns = np.linalg.norm(step)
        f0 = 0.5 * F @ F
        lin = F + J @ step
        pred = f0 - 0.5 * lin @ lin
        trial = _system(fp, v + step)
        if trial is None:
            radius = 0.25 * min(radius, ns)
            if radius < 1e-14 * (1 + np.linalg.norm(v)):
                break
            continue
        Ft, dpt = trial
        act = f0 - 0.5 * Ft @ Ft
        rho = act / pred if pred > 0 else (1.0 if act >= 0 else -1.0)
        if rho < 0.25:
            radius = 0.25 * min(radius, ns)
        elif rho > 0.75 and ns >= 0.99 * radius:
            radius *= 2.0
        if rho > 0.1 or (pred <= 1e-300 and act >= 0):
            v, F, dp = v + step, Ft, dpt
        elif radius < 1e-14 * (1 + np.linalg.norm(v)):
            break
    return v, F, it


def _inner_mu(a, b, x, mu0, iters=200):
    """Per-coordinate root of ``mu + Psi(a - mu, b - mu) = x`` (needs ``a < x < b``)."""

    def h(mu):
        p, dp = moments(a - mu, b - mu)
        return mu + p - x, 1.0 + dp

    lo = mu0 - 1.0
    hi = mu0 + 1.0
    step = 1.0
    for _ in range(1100):
        vl, _ = h(lo)
        vh, _ = h(hi)
        need_lo = ~(vl < 0)
        need_hi = ~(vh > 0)
        if not (need_lo.any() or need_hi.any()):
            break
        step *= 2.0
        lo = np.where(need_lo, lo - step, lo)
        hi = np.where(need_hi, hi + step, hi)
    mu = np.clip(mu0, lo, hi)
    for _ in range(iters):
        val, der = h(mu)
        lo = np.where(val < 0, mu, lo)
        hi = np.where(val > 0, mu, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = mu - val / der
        bad = ~((nxt > lo) & (nxt < hi))
        nxt = np.where(bad, 0.5 * (lo + hi), nxt)
        done = (np.abs(val) <= 1e-14 * (1 + np.abs(x))) | (hi - lo <= 4e-16 * (1 + np.abs(mu)))
        mu = np.where(done, mu, nxt)
        if done.all():
            break
    return mu


def _make_feasible(fp, x):
    """Clamp each coordinate into its sequential interval, in order."""
    x = np.array(x, dtype=float)
    for k in range(fp.m):
        off = fp.unit[k, :k] @ x[:k]
        a = fp.lower_scaled[k] - off
        b = fp.upper_scaled[k] - off
        if a < x[k] < b:
            continue
        if np.isfinite(a) and np.isfinite(b):
            x[k] = a + (b - a) * (0.999 if x[k] >= b else 0.001)
        else:
            x[k] = moments(a, b)[0]
    return x


def _reduced(fp, x, mu_guess):
    """``phi(x) = min_mu psi``: value, gradient, Hessian and the inner ``mu``."""
    a, b = fp.intervals(x)
    mu = _inner_mu(a, b, x, mu_guess)
    lo, hi = a - mu, b - mu
    lp = log_mass(lo, hi)
    p, dp = moments(lo, hi, lp)
    val = -x @ mu + 0.5 * mu @ mu + lp.sum()
    gx = -mu + fp.unit.T @ p - p
    blocks = _blocks(fp, dp)
    B = blocks.mu_x
    S = blocks.x_x - B.T @ (B / (1.0 + dp)[:, None])
    return val, gx, S, mu


def _barrier_solve(fp, x, mu, gap_tol=1e-10, shrink=0.2, max_newton=100):
    m = fp.m
    Lu = fp.unit
    us, ls = fp.upper_scaled, fp.lower_scaled
    fu, fl = np.isfinite(us), np.isfinite(ls)
    n_con = int(fu.sum() + fl.sum())
    x = _make_feasible(fp, x)

    def slacks(z):
        r = Lu @ z
        return np.where(fu, us - r, 1.0), np.where(fl, r - ls, 1.0)

    def objective(z, t, mu_guess):
        su, sl = slacks(z)
        if np.any(su <= 0) or np.any(sl <= 0):
            return None
        val, gx, S, mu_z = _reduced(fp, z, mu_guess)
        f = t * val + np.log(su[fu]).sum() + np.log(sl[fl]).sum()
        if not np.isfinite(f):
            return None
        iu = np.where(fu, 1.0 / su, 0.0)
        il = np.where(fl, 1.0 / sl, 0.0)
        grad = t * gx - Lu.T @ iu + Lu.T @ il
        H = t * S - Lu.T @ ((iu**2 + il**2)[:, None] * Lu)
        return f, grad, H, mu_z, iu, il

    t = 1.0
    total = 0
    while True:
        cur = objective(x, t, mu)
        for _ in range(max_newton):
            f, grad, H, mu, iu, il = cur
            gnorm = np.abs(grad).max()
            if gnorm <= 1e-9 * t:
                break
            try:
                dx = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(H, -grad, rcond=None)[0]
            dec = grad @ dx
            total += 1
            # near the central path a full step that shrinks the gradient is taken
            # as is; the value test is unreliable once t * phi dwarfs the barrier
            step = 1.0
            nxt = objective(x + dx, t, mu)
            if nxt is None or np.abs(nxt[1]).max() >= gnorm:
                while step > 1e-12:
                    step *= 0.5
                    nxt = objective(x + step * dx, t, mu)
                    if nxt is not None and nxt[0] >= f + 0.25 * step * dec:
                        break
                else:
                    break
            x, cur = x + step * dx, nxt
            if step * np.abs(dx).max() <= 1e-12 * (1.0 + np.abs(x).max()):
                # x has settled; remaining gradient is rounding amplified by H
                break
        f, grad, H, mu, iu, il = cur
        if n_con == 0 or n_con / t <= gap_tol:
            return x, mu, iu / t, il / t, total
        t /= shrink


def _polish(fp, x, mu, max_iter=30):
    """Undamped Newton on the joint gradient, kept only while its norm shrinks.

    Stationary points are strictly inside the box, so no barrier is needed
    once the start is close.  The joint system is used rather than the
    reduced one because the reduced Hessian can be badly scaled on thin boxes.
    """
    m = fp.m
    v = np.concatenate([x, mu])
    cur = _system(fp, v)
    if cur is None:
        return x, mu, 0
    F, dp = cur
    best = np.abs(F).max()
    steps = 0
    for _ in range(max_iter):
        if best <= 1e-14 * (1.0 + np.abs(v).max()):
            break
        w = v + _newton_step(_blocks(fp, dp), F, m)
        if not is_feasible(fp, w[:m], tol=0.0):
            break
        nxt = _system(fp, w)
        if nxt is None or not np.abs(nxt[0]).max() < best:
            break
        v, (F, dp) = w, nxt
        best = np.abs(F).max()
        steps += 1
    return v[:m].copy(), v[m:].copy(), steps


def kkt_residual(fp: FactoredProblem, sol: TiltingSolution) -> float:
    """Max-norm of the KKT residuals (stationarity, feasibility, slackness)."""
    x, mu = sol.x_star, sol.mu_star
    eta1 = np.asarray(sol.eta_upper, dtype=float)
    eta2 = np.asarray(sol.eta_lower, dtype=float)
    gx, gmu = grad_psi(fp, x, mu)
    stat = gx - fp.unit.T @ eta1 + fp.unit.T @ eta2
    r = fp.L @ x
    fu, fl = np.isfinite(fp.upper), np.isfinite(fp.lower)
    primal = max(0.0, float(np.max(np.where(fu, r - fp.upper, -np.inf), initial=0.0)),
                 float(np.max(np.where(fl, fp.lower - r, -np.inf), initial=0.0)))
    dual = max(0.0, float(-eta1.min()), float(-eta2.min()))
    gap_u = np.where(fu, r - np.where(fu, fp.upper, 0.0), 0.0)
    gap_l = np.where(fl, r - np.where(fl, fp.lower, 0.0), 0.0)
    slack = max(float(np.abs(eta1 * gap_u).max(initial=0.0)),
                float(np.abs(eta2 * gap_l).max(initial=0.0)))
    return float(max(np.abs(gmu).max(), np.abs(stat).max(), primal, dual, slack))


def is_feasible(fp: FactoredProblem, x, tol: float = FEAS_TOL) -> bool:
    r = fp.L @ np.asarray(x, dtype=float)
    return bool(np.all(r >= fp.lower - tol) and np.all(r <= fp.upper + tol))


def solve_tilting(
    fp: FactoredProblem,
    *,
    max_iter: int = 200,
    tol: float = 1e-10,
    start=None,
    force_fallback: bool = False,
) -> TiltingSolution:
    """Compute the minimax pair ``(x*, mu*)`` and ``psi* = psi(x*; mu*)``."""
    m = fp.m
    x0, mu0 = initial_point(fp) if start is None else map(np.asarray, start)
    v, F, iters = _dogleg(fp, np.concatenate([x0, mu0]), max_iter, tol)
    x, mu = v[:m], v[m:]
    fnorm = float(np.abs(F).max())
    zeros = np.zeros(m)
    if fnorm <= KKT_TOL and is_feasible(fp, x) and not force_fallback:
        return TiltingSolution(x.copy(), mu.copy(), psi(fp, x, mu), fnorm, zeros, zeros,
                               iters, False)
    log.info("dogleg ended with |grad|=%.2e after %d iterations; using barrier fallback",
             fnorm, iters)
    xb, mub, eta1, eta2, nb = _barrier_solve(fp, x, mu)
    xp, mup, npol = _polish(fp, xb, mub)
    total = iters + nb + npol
    candidates = [TiltingSolution(xb, mub, psi(fp, xb, mub), 0.0, eta1, eta2, total, True)]
    if npol:
        # the polished point is interior, where the multipliers vanish
        candidates.append(TiltingSolution(xp, mup, psi(fp, xp, mup), 0.0, zeros, zeros,
                                          total, True))
    scored = [(kkt_residual(fp, c), i) for i, c in enumerate(candidates)]
    res, i = min(scored)
    c = candidates[i]
    sol = TiltingSolution(c.x_star, c.mu_star, c.psi_star, res, c.eta_upper, c.eta_lower,
                          total, True)
    if res > KKT_TOL:
        raise NoConvergence(f"tilting solver stopped with KKT residual {res:.3e}", best=sol)
    return sol
