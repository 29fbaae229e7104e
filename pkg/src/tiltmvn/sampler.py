"""Exact i.i.d. sampling from the truncated normal by accept-reject.

Proposals are sequential paths under the saddle-point tilt.  A path ``x``
is accepted with probability ``exp(psi(x; mu*) - psi*)``, which never
exceeds one when the saddle point is correct.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, EnvelopeViolation
from .estimator import _CHUNK_FLOATS, sov_paths
from .problem import FactoredProblem, TruncationProblem, factorize
from .tilting import KKT_TOL, TiltingSolution, solve_tilting

DEFAULT_MAX_PROPOSALS = 10**8
ENVELOPE_SLACK = 1e-9
_MAX_ROUND = 1 << 18


@dataclass
class SampleBatch:
    samples: np.ndarray
    proposals_used: int
    seed: int | None

    @property
    def n_accepted(self) -> int:
        return self.samples.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.proposals_used if self.proposals_used else 0.0

    def metadata(self) -> dict:
        return {
            "n_accepted": self.n_accepted,
            "proposals_used": self.proposals_used,
            "acceptance_rate": self.acceptance_rate,
            "seed": self.seed,
        }


def _draw_constrained(fp, tilt, n, rng, max_proposals):
    """Accepted constrained coordinates ``x`` (``n x m``) and proposals used."""
    m = fp.m
    mu = tilt.mu_star
    psi_star = tilt.psi_star
    kept = []
    have = 0
    used = 0
    # start small, then size rounds from the running acceptance rate
    rate = 0.5
    while have < n:
        need = n - have
        size = int(min(_MAX_ROUND, max(64, math.ceil(1.2 * need / max(rate, 1e-6)))))
        size = min(size, max(64, _CHUNK_FLOATS // max(m, 1)), max_proposals - used)
        if size <= 0:
            raise BudgetExceeded(
                f"{used} proposals gave only {have} of {n} draws", proposals=used, accepted=have
            )
        U = rng.random((m, size))
        X, logw = sov_paths(fp, mu, U)
        excess = logw - psi_star
        if np.any(excess > ENVELOPE_SLACK):
            worst = float(excess.max())
            raise EnvelopeViolation(
                f"proposal weight exceeds the envelope by {worst:.3e} on the log scale"
            )
        # log U <= psi(X) - psi*, written as U <= exp(...)
        accept = np.log(rng.random(size)) <= excess
        idx = np.flatnonzero(accept)
        if idx.size > need:
            # keep proposal order: the first `need` acceptances are used
            used += int(idx[need - 1]) + 1
            idx = idx[:need]
        else:
            used += size
        kept.append(X[:, idx].T)
        have += idx.size
        rate = max(have, 1) / used
    return np.vstack(kept) if kept else np.zeros((0, m)), used


def sample(
    fp: FactoredProblem,
    tilt: TiltingSolution | None = None,
    n: int = 1,
    seed=None,
    *,
    max_proposals: int = DEFAULT_MAX_PROPOSALS,
) -> SampleBatch:
    """``n`` exact draws ``z ~ N(0, I)`` conditioned on ``l <= A z <= u``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if tilt is None:
        tilt = solve_tilting(fp)
    if tilt.grad_norm > KKT_TOL:
        raise ValueError(f"tilting solution is not certified (residual {tilt.grad_norm:.2e})")
    ss = np.random.SeedSequence(seed)
    prop_seq, free_seq = ss.spawn(2)
    rng = np.random.Generator(np.random.Philox(prop_seq))
    x, used = _draw_constrained(fp, tilt, n, rng, max_proposals)
    free = None
    if fp.free_dims:
        free = np.random.Generator(np.random.Philox(free_seq)).standard_normal((n, fp.free_dims))
    z = fp.to_standard(x, free) if n else np.zeros((0, fp.d))
    return SampleBatch(samples=z, proposals_used=used, seed=seed)


def sample_covariance_form(
    problem: TruncationProblem,
    n: int,
    seed=None,
    *,
    reorder: bool = True,
    max_proposals: int = DEFAULT_MAX_PROPOSALS,
) -> tuple[np.ndarray, SampleBatch]:
    """Draws of ``X ~ N(0, Sigma)`` conditioned on ``l <= X <= u``.

    For a matrix-form problem this is ``A z``.  Returns the draws together
    with the underlying batch.
    """
    fp = factorize(problem, reorder=reorder)
    batch = sample(fp, None, n, seed, max_proposals=max_proposals)
    if fp.Q is None:
        # z holds the permuted constrained coordinates
        return fp.to_constraint_space(batch.samples), batch
    return batch.samples @ problem.matrix.T, batch
