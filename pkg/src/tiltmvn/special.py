"""Stable scalar kernels for the standard normal law.

Every function here has a vectorised form that works on shifted endpoints
``a < b`` (arrays broadcast together) and is used in the hot loops of the
estimator and sampler, plus a small scalar API built on :class:`Interval1D`.

Tail probabilities are always handled on the log scale.  Intervals lying
entirely in one tail are reflected so that the computation only ever
subtracts upper-tail quantities of the same sign, which avoids the
cancellation you get from ``Phi(b) - Phi(a)`` deep in the tails.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfcx, log_ndtr, ndtr, ndtri, ndtri_exp

from .errors import DegenerateInterval

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT1_2 = math.sqrt(0.5)
_SQRT_2_PI = math.sqrt(2.0 / math.pi)
_GL_T, _GL_W = np.polynomial.legendre.leggauss(32)
_GL_T = 0.5 * (_GL_T + 1.0)
# width * reach below which the variance comes from quadrature
_NARROW = 8.0


def _tail_gap(a, b):
    """``log Phibar(b) - log Phibar(a)`` for ``0 <= a < b``, without cancellation."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        quad = np.where(np.isinf(b), -np.inf, -0.5 * (b - a) * (b + a))
        return quad + np.log(erfcx(b * _SQRT1_2) / erfcx(a * _SQRT1_2))


def _upper_tail(a, b):
    """``(log mass, Psi, Psi')`` for ``0 < a < b``."""
    frac = -np.expm1(_tail_gap(a, b))
    lp = log_ndtr(-a) + np.log(frac)
    finite = np.isfinite(b)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        # phi(a) / P(a < Z < b) via the scaled complementary error function
        ra = _SQRT_2_PI / erfcx(a * _SQRT1_2) / frac
        quad = np.where(finite, -0.5 * (b - a) * (b + a), -np.inf)
        rb = ra * np.exp(quad)
        psi = ra * -np.expm1(quad)
        # a ra - b rb - Psi^2, regrouped around a so narrow intervals keep precision
        width_term = np.where(finite, (b - a) * rb, 0.0)
        dpsi = psi * (a - psi) - width_term
    return lp, psi, dpsi


@dataclass(frozen=True)
class Interval1D:
    """Closed interval ``[a, b]`` with ``a < b``; either end may be infinite."""

    a: float
    b: float

    def __post_init__(self):
        if math.isnan(self.a) or math.isnan(self.b):
            raise DegenerateInterval("interval endpoints must not be NaN")
        if not self.a < self.b:
            raise DegenerateInterval(f"empty interval: a={self.a!r} >= b={self.b!r}")

    def shifted(self, mu: float) -> tuple[float, float]:
        return self.a - mu, self.b - mu


def log_phi_bar(x):
    """``log P(Z > x)`` for standard normal ``Z``."""
    return log_ndtr(np.negative(x))


def log_pdf(x):
    """Log standard normal density, ``-inf`` at infinite arguments."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = -0.5 * x * x - LOG_SQRT_2PI
    return np.where(np.isinf(x), -np.inf, out)


def log_mass(a, b):
    """Vectorised ``log(Phi(b) - Phi(a))``.

    Returns ``-inf`` where ``a >= b``; callers that need to reject such
    intervals must check beforehand.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.full(a.shape, -np.inf)
    ok = a < b
    upper = ok & (a > 0)
    lower = ok & (b < 0)
    mid = ok & ~upper & ~lower
    with np.errstate(divide="ignore", invalid="ignore"):
        if upper.any():
            a_, b_ = a[upper], b[upper]
            out[upper] = log_ndtr(-a_) + np.log(-np.expm1(_tail_gap(a_, b_)))
        if lower.any():
            a_, b_ = -b[lower], -a[lower]
            out[lower] = log_ndtr(-a_) + np.log(-np.expm1(_tail_gap(a_, b_)))
        if mid.any():
            # opposite signs: erf values have opposite signs, no cancellation
            out[mid] = np.log(0.5 * (erf(b[mid] * _SQRT1_2) - erf(a[mid] * _SQRT1_2)))
    narrow = _narrow_mask(a, b)
    if narrow.any():
        out[narrow] = _narrow_stats(a[narrow], b[narrow])[0]
    return out


def moments(a, b, lp=None):
    """Vectorised ``(Psi, Psi')`` for the standard normal truncated to ``[a, b]``.

    ``Psi`` is the truncated mean and ``1 + Psi'`` the truncated variance.
    ``lp`` may carry a precomputed :func:`log_mass`.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    psi = np.full(a.shape, np.nan)
    dpsi = np.full(a.shape, np.nan)
    ok = a < b
    up = ok & (a > 0)
    lo = ok & (b < 0)
    mid = ok & ~up & ~lo
    if up.any():
        _, psi[up], dpsi[up] = _upper_tail(a[up], b[up])
    if lo.any():
        # reflect: Z on [a, b] is -Z on [-b, -a]
        _, p, dp = _upper_tail(-b[lo], -a[lo])
        psi[lo], dpsi[lo] = -p, dp
    if mid.any():
        am, bm = a[mid], b[mid]
        lpm = log_mass(am, bm) if lp is None else np.broadcast_to(lp, a.shape)[mid]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ra = np.exp(log_pdf(am) - lpm)
            rb = np.exp(log_pdf(bm) - lpm)
            p = ra - rb
            ta = np.where(np.isinf(am), 0.0, am * ra)
            tb = np.where(np.isinf(bm), 0.0, bm * rb)
        psi[mid], dpsi[mid] = p, ta - tb - p * p
    narrow = _narrow_mask(a, b)
    if narrow.any():
        _, psi[narrow], var = _narrow_stats(a[narrow], b[narrow])
        dpsi[narrow] = var - 1.0
    return psi, dpsi


def _narrow_stats(a, b):
    """``(log mass, Psi, 1 + Psi')`` by 32-point Gauss-Legendre on a narrow interval.

    The closed forms subtract nearly equal tail quantities here.
    """
    w = b - a
    anchor = np.where(a > 0, a, np.where(b < 0, b, 0.0))
    x = a[:, None] + w[:, None] * _GL_T
    g = _GL_W * np.exp(-0.5 * (x - anchor[:, None]) * (x + anchor[:, None]))
    tot = g.sum(axis=1)
    y = w[:, None] * _GL_T
    mean = (g * y).sum(axis=1) / tot
    var = (g * (y - mean[:, None]) ** 2).sum(axis=1) / tot
    lp = np.log(0.5 * w * tot) + log_pdf(anchor)
    return lp, a + mean, var


def _narrow_mask(a, b):
    with np.errstate(invalid="ignore", over="ignore"):
        keep = (a < b) & np.isfinite(a) & np.isfinite(b)
        return keep & ((b - a) * np.maximum(np.abs(a), np.abs(b)) <= _NARROW)


def mass_and_quantile(a, b, p):
    """``(log_mass(a, b), inverse_cdf(a, b, p))`` sharing the tail evaluations."""
    a, b, p = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(p, dtype=float)
    )
    x = np.full(a.shape, np.nan)
    lp = np.full(a.shape, -np.inf)
    ok = a < b
    upper = ok & (a > 0)
    lower = ok & (b < 0)
    mid = ok & ~upper & ~lower
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if upper.any():
            au, bu = a[upper], b[upper]
            gap = _tail_gap(au, bu)
            la = log_ndtr(-au)
            lp[upper] = la + np.log(-np.expm1(gap))
            x[upper] = -ndtri_exp(la + np.log1p(p[upper] * np.expm1(gap)))
        if lower.any():
            al, bl = a[lower], b[lower]
            # log Phi(x) = log Phi(b) + log(p + (1 - p) Phi(a) / Phi(b))
            gap = _tail_gap(-bl, -al)
            lb = log_ndtr(bl)
            lp[lower] = lb + np.log(-np.expm1(gap))
            x[lower] = ndtri_exp(lb + np.log1p((1.0 - p[lower]) * np.expm1(gap)))
        if mid.any():
            am, bm, pm = a[mid], b[mid], p[mid]
            mass = 0.5 * (erf(bm * _SQRT1_2) - erf(am * _SQRT1_2))
            lp[mid] = np.log(mass)
            below = ndtr(am) + pm * mass
            above = ndtr(-bm) + (1.0 - pm) * mass
            x[mid] = np.where(below < 0.5, ndtri(below), -ndtri(above))
    narrow = _narrow_mask(a, b)
    if narrow.any():
        lp[narrow] = _narrow_stats(a[narrow], b[narrow])[0]
    return lp, np.clip(x, a, b)


def inverse_cdf(a, b, p):
    """Vectorised quantile of the standard normal truncated to ``[a, b]``.

    One-tail intervals are inverted through ``ndtri_exp`` on the log-tail
    scale, so endpoints like ``a = 40`` are handled without underflow.
    """
    return mass_and_quantile(a, b, p)[1]


def log_prob_interval(iv: Interval1D, mu: float = 0.0) -> float:
    """``log P(a <= Z + mu <= b)``, i.e. ``log(Phi(b - mu) - Phi(a - mu))``."""
    lo, hi = iv.shifted(mu)
    if not lo < hi:
        raise DegenerateInterval(f"interval collapses after shift by {mu}")
    return float(log_mass(lo, hi))


def psi_ratio(iv: Interval1D, mu: float = 0.0) -> tuple[float, float]:
    """``(Psi, Psi')`` of the interval after shifting by ``mu``."""
    lo, hi = iv.shifted(mu)
    if not lo < hi:
        raise DegenerateInterval(f"interval collapses after shift by {mu}")
    psi, dpsi = moments(lo, hi)
    return float(psi), float(dpsi)


def trunc_norm_inverse(iv: Interval1D, mu: float, p: float) -> float:
    """Quantile ``p`` of ``N(mu, 1)`` truncated to ``iv``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    lo, hi = iv.shifted(mu)
    if not lo < hi:
        raise DegenerateInterval(f"interval collapses after shift by {mu}")
    return float(mu + inverse_cdf(lo, hi, p))
