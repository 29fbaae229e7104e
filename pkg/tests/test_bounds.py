import math

import numpy as np
import pytest
from scipy.special import log_ndtr

from tiltmvn.bounds import (
    lower_bound,
    mills_ratio_approx,
    qp_kkt_residual,
    solve_tail_qp,
    tail_asymptotic,
    vre_diagnostic,
)
from tiltmvn.estimator import estimate
from tiltmvn.harness import ProblemSpec, make_problem, random_correlation
from tiltmvn.problem import TruncationProblem, factorize
from tiltmvn.tilting import solve_tilting

INF = np.inf


class TestLowerBound:
    def test_independent_box_tight(self):
        d = 5
        prob = TruncationProblem.from_covariance(np.eye(d), np.full(d, -1.0), np.full(d, 1.0))
        lb = lower_bound(prob)
        exact = d * math.log(math.erf(1 / math.sqrt(2)))
        assert lb.log_lower <= exact + 1e-12
        assert exact - lb.log_lower <= 1e-6
        assert np.all(lb.sigma > 0)

    def test_example1_d10(self):
        prob = make_problem(ProblemSpec(kind="example1", d=10))
        lb = lower_bound(prob)
        assert math.exp(lb.log_lower) == pytest.approx(8.5483e-15, rel=1e-3)

    @pytest.mark.parametrize("kind,d,seed", [("example1", 5, 0), ("example3", 10, 1),
                                             ("example4", 10, 2), ("orthant_half", 10, 0)])
    def test_sandwich(self, kind, d, seed):
        prob = make_problem(ProblemSpec(kind=kind, d=d, seed=seed))
        fp = factorize(prob)
        tilt = solve_tilting(fp)
        lb = lower_bound(prob, fp)
        r = estimate(fp, "MET", 10_000, seed, tilt=tilt)
        assert lb.log_lower <= tilt.psi_star
        assert math.exp(lb.log_lower) <= r.estimate * (1 + 3 * r.rel_error)

    def test_rank_deficient_matrix_form(self):
        # m < d: bound acts on A A^T
        rng = np.random.default_rng(1)
        A = rng.normal(size=(3, 6))
        prob = TruncationProblem.from_matrix(A, np.zeros(3), np.full(3, INF))
        fp = factorize(prob)
        lb = lower_bound(prob, fp)
        r = estimate(fp, "MET", 12_000, 0)
        assert math.exp(lb.log_lower) <= r.estimate * (1 + 3 * r.rel_error)


class TestTailQP:
    def test_identity(self):
        tp = solve_tail_qp(np.eye(4), 2.5, np.ones(4))
        assert np.allclose(tp.x_qp, 2.5)
        assert tp.d1 == 4 and tp.d2 == 0 and tp.q.size == 0
        assert tp.minimum == pytest.approx(0.5 * 2.5**2 * 4)

    @pytest.mark.parametrize("rho", [0.9, -0.5, 0.3])
    def test_two_d_grid(self, rho):
        L = np.array([[1.0, 0.0], [rho, math.sqrt(1 - rho * rho)]])
        cov = L @ L.T
        gamma, p = 1.7, np.array([1.0, 1.0])
        tp = solve_tail_qp(cov, gamma, p)
        # brute force over a dense grid, then local refinement
        best = INF
        c = np.zeros(2)
        for width in (6.0, 0.2, 0.01):
            g = np.linspace(-width, width, 801)
            X0, X1 = np.meshgrid(c[0] + g, c[1] + g, indexing="ij")
            feas = (L[0, 0] * X0 >= gamma * p[0] - 1e-12) & \
                   (L[1, 0] * X0 + L[1, 1] * X1 >= gamma * p[1] - 1e-12)
            obj = np.where(feas, 0.5 * (X0**2 + X1**2), INF)
            i = np.unravel_index(np.argmin(obj), obj.shape)
            best, c = obj[i], np.array([X0[i], X1[i]])
        assert tp.minimum == pytest.approx(best, rel=1e-4)
        assert qp_kkt_residual(tp) <= 1e-9
        assert tp.d1 >= 1

    def test_minimum_formula(self):
        cov = random_correlation(6, 3)
        p = np.linspace(0.5, 1.5, 6)
        gamma = 2.0
        tp = solve_tail_qp(cov, gamma, p)
        y = np.linalg.solve(tp.L11, p[tp.active])
        assert tp.minimum == pytest.approx(0.5 * gamma**2 * y @ y, rel=1e-12)

    def test_optimality_random_points(self):
        cov = random_correlation(5, 7)
        p = np.ones(5)
        tp = solve_tail_qp(cov, 1.0, p)
        L = np.linalg.cholesky(cov)
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 1000:
            x = rng.normal(scale=3.0, size=5)
            if np.all(L @ x >= p):
                checked += 1
                assert 0.5 * x @ x >= tp.minimum - 1e-12

    def test_requires_positive(self):
        with pytest.raises(ValueError):
            solve_tail_qp(np.eye(2), 0.0, np.ones(2))
        with pytest.raises(ValueError):
            solve_tail_qp(np.eye(2), 1.0, np.array([1.0, -1.0]))


class TestAsymptotic:
    def test_one_d_mills(self):
        g = 6.0
        approx = tail_asymptotic(np.eye(1), g, np.ones(1))
        assert approx == pytest.approx(-0.5 * g * g - math.log(g) - 0.5 * math.log(2 * math.pi))
        assert abs(approx - log_ndtr(-g)) / abs(log_ndtr(-g)) <= 0.03

    def test_independent(self):
        d, g = 4, 5.0
        approx = tail_asymptotic(np.eye(d), g, np.ones(d))
        assert approx == pytest.approx(d * (-0.5 * g * g - math.log(g) - 0.5 * math.log(2 * math.pi)))

    def test_mills_special_case(self):
        sigma = 0.5 * np.eye(4) + 0.5
        l_star = np.ones(4)
        g = 3.0
        tp_val = tail_asymptotic(sigma, g, sigma @ l_star)
        assert tp_val == pytest.approx(mills_ratio_approx(sigma, l_star, g), rel=1e-10)

    @pytest.mark.parametrize("k", [1, 2])
    def test_degenerate_directions_use_orthant(self, k):
        # L = [[1, 0], [1, I_k]]: the extra constraints are tight at the minimiser
        # with zero multipliers, so q = 0 and the constant gains P(Y > 0) = 2^-k
        d = k + 1
        L = np.eye(d)
        L[1:, 0] = 1.0
        cov = L @ L.T
        g = 5.0
        tp = solve_tail_qp(cov, g, np.ones(d))
        assert tp.J.size == k
        base = -0.5 * g * g - math.log(g) - 0.5 * math.log(2 * math.pi)
        val = tail_asymptotic(cov, g, np.ones(d), tp, n=12_000)
        assert val - base == pytest.approx(k * math.log(0.5), abs=1e-3)


def test_vre_identity_is_exact():
    # with independent coordinates the intervals ignore x, so mu* = 0 and psi* = log l
    d = 3

    def family(g):
        return TruncationProblem.from_covariance(np.eye(d), np.full(d, g), np.full(d, INF))

    rows = vre_diagnostic(family, [1, 2, 3, 4, 5], n=1200)
    gaps = [r.log_psi_star - d * log_ndtr(-r.gamma) for r in rows]
    assert np.allclose(gaps, 0.0, atol=1e-12)
    assert all(r.log_asymptote is not None for r in rows)


def test_vre_trend_correlated():
    d = 3
    sigma = 0.5 * np.eye(d) + 0.5

    def family(g):
        return TruncationProblem.from_covariance(sigma, np.full(d, g), np.full(d, INF))

    rows = vre_diagnostic(family, [1, 2, 3, 4, 5, 6], n=12_000)
    ratios = [r.ratio for r in rows]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] < 1.03
    sov = [r.sov_rel_err for r in rows]
    assert all(b > a for a, b in zip(sov, sov[1:]))


def test_vre_refuses_gamma_zero():
    with pytest.raises(ValueError):
        vre_diagnostic(lambda g: None, [0.0, 1.0])
