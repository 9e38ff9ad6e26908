import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmrkit.data import GroupSample, GroupedDataset
from mmrkit.exceptions import LossMismatchError, SeparationError, SingularityError
from mmrkit.families import get_family
from mmrkit.local_fit import (
    empirical_regret,
    glm_newton,
    glm_risk_grad,
    group_summaries,
    least_squares,
)

from conftest import central_diff_gradient


class TestLeastSquares:
    def test_exact_line(self):
        fit = least_squares(GroupSample("a", np.array([[1.0], [2.0]]), np.array([2.0, 4.0])))
        assert fit.beta_hat[0] == pytest.approx(2.0)
        assert fit.wuv == pytest.approx(0.0, abs=1e-24)
        assert fit.sigma_mat[0, 0] == pytest.approx(2.5)
        assert fit.mu_hat[0] == pytest.approx(5.0)
        assert fit.wev == pytest.approx(10.0)
        assert fit.wmr == fit.wuv

    def test_zero_response(self, rng):
        fit = least_squares(GroupSample("z", rng.normal(size=(9, 2)), np.zeros(9)))
        assert_allclose(fit.beta_hat, np.zeros(2), atol=1e-14)
        assert fit.wev == pytest.approx(0.0, abs=1e-28)

    def test_matches_normal_equation_oracle(self, rng):
        for _ in range(10):
            X = rng.normal(size=(50, 3))
            y = rng.normal(size=50)
            fit = least_squares(GroupSample("r", X, y))
            oracle = np.linalg.solve(X.T @ X / 50, X.T @ y / 50)
            assert np.max(np.abs(fit.beta_hat - oracle)) <= 1e-10

    def test_rank_deficient_names_group(self, rng):
        col = rng.normal(size=(8, 1))
        with pytest.raises(SingularityError, match="dup"):
            least_squares(GroupSample("dup", np.hstack([col, col]), rng.normal(size=8)))


class TestGlmNewton:
    def test_logistic_intercept_only_balanced(self):
        X = np.ones((10, 1))
        y = np.array([0.0, 1.0] * 5)
        fit = glm_newton(GroupSample("b", X, y), get_family("logistic"))
        assert fit.beta_hat[0] == pytest.approx(0.0, abs=1e-9)

    def test_logistic_separation(self):
        X = np.ones((6, 1))
        y = np.ones(6)
        with pytest.raises(SeparationError):
            glm_newton(GroupSample("sep", X, y), get_family("logistic"))

    def test_poisson_intercept_only(self):
        X = np.ones((9, 1))
        y = np.array([3.0] * 9)
        fit = glm_newton(GroupSample("p", X, y), get_family("poisson"))
        # 1-D oracle: bisection on A'(b) = exp(b) = mean(y)
        lo, hi = 0.0, 2.0
        for _ in range(200):
            mid = (lo + hi) / 2
            if np.exp(mid) < 3.0:
                lo = mid
            else:
                hi = mid
        assert fit.beta_hat[0] == pytest.approx((lo + hi) / 2, abs=1e-8)

    def test_score_residual_below_tol(self, rng):
        fam = get_family("logistic")
        for _ in range(5):
            X = rng.normal(size=(60, 3))
            beta = rng.normal(size=3) * 0.7
            y = (rng.random(60) < fam.mean(X @ beta)).astype(float)
            fit = glm_newton(GroupSample("s", X, y), fam, tol=1e-9)
            _, grad = glm_risk_grad(fam, X, y, fit.beta_hat)
            assert np.max(np.abs(grad)) <= 1e-9

    def test_monotone_risk(self, rng):
        fam = get_family("poisson")
        X = rng.normal(size=(40, 2)) * 0.5
        y = rng.poisson(lam=np.exp(X @ np.array([0.4, -0.2]))).astype(float)
        init = np.array([2.0, 2.0])
        fit = glm_newton(GroupSample("m", X, y), fam, init=init)
        init_risk, _ = glm_risk_grad(fam, X, y, init)
        assert fit.wmr <= init_risk

    def test_wmr_is_minimal_over_probes(self, rng):
        fam = get_family("logistic")
        X = rng.normal(size=(80, 2))
        y = (rng.random(80) < fam.mean(X @ np.array([0.5, -1.0]))).astype(float)
        fit = glm_newton(GroupSample("w", X, y), fam)
        for _ in range(30):
            probe = fit.beta_hat + rng.normal(size=2) * 0.5
            risk, _ = glm_risk_grad(fam, X, y, probe)
            assert fit.wmr <= risk + 1e-12


class TestEmpiricalRegret:
    def test_zero_at_fit(self, rng):
        X = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        sample = GroupSample("g", X, y)
        fit = least_squares(sample)
        regret, _ = empirical_regret(fit.beta_hat, fit, sample, "square")
        assert regret == pytest.approx(0.0, abs=1e-12)

    def test_square_regret_identity(self, rng):
        for _ in range(20):
            X = rng.normal(size=(25, 3))
            y = rng.normal(size=25)
            sample = GroupSample("g", X, y)
            fit = least_squares(sample)
            theta = rng.normal(size=3) * 2
            regret, grad = empirical_regret(theta, fit, sample, "square")
            diff = theta - fit.beta_hat
            assert regret == pytest.approx(float(diff @ fit.sigma_mat @ diff), abs=1e-10)
            assert regret >= -1e-10
            # gradient is the risk gradient
            resid = y - X @ theta
            assert_allclose(grad, -2.0 * X.T @ resid / 25, atol=1e-12)

    def test_logistic_second_order(self, rng):
        fam = get_family("logistic")
        X = rng.normal(size=(200, 2))
        y = (rng.random(200) < fam.mean(X @ np.array([0.3, -0.4]))).astype(float)
        sample = GroupSample("g", X, y)
        fit = glm_newton(sample, fam, tol=1e-12)
        delta = 1e-4
        theta = fit.beta_hat + np.array([delta, 0.0])
        regret, _ = empirical_regret(theta, fit, sample, fam)
        # finite-difference Hessian (1,1) entry of the empirical risk
        h = 1e-5
        risk_at = lambda t: glm_risk_grad(fam, X, y, t)[0]
        e1 = np.array([1.0, 0.0])
        hess11 = (
            risk_at(fit.beta_hat + h * e1)
            - 2 * risk_at(fit.beta_hat)
            + risk_at(fit.beta_hat - h * e1)
        ) / h**2
        assert regret == pytest.approx(0.5 * delta**2 * hess11, rel=2e-3)

    def test_mismatch_rejected(self, rng):
        X = rng.normal(size=(10, 1))
        y = rng.normal(size=10)
        sample = GroupSample("g", X, y)
        fit = least_squares(sample)
        with pytest.raises(LossMismatchError):
            empirical_regret(np.zeros(1), fit, sample, get_family("logistic"))
        other = GroupSample("h", X, y)
        with pytest.raises(LossMismatchError):
            empirical_regret(np.zeros(1), fit, other, "square")


class TestGroupSummaries:
    def test_single_group(self, rng):
        ds = GroupedDataset((GroupSample("only", rng.normal(size=(12, 2)), rng.normal(size=12)),))
        fits = group_summaries(ds, "square")
        assert len(fits) == 1
        assert fits[0].group_id == "only"

    def test_homogeneous_betas_shrink(self):
        from mmrkit.hiersim import gen_lm_data

        beta = np.array([1.0, -2.0, 0.5])
        spreads = []
        for n in (100, 10_000):
            ds = gen_lm_data(np.tile(beta, (4, 1)), n, 0.0, seed=(3, n))
            fits = group_summaries(ds, "square")
            betas = np.stack([f.beta_hat for f in fits])
            spreads.append(
                max(
                    np.linalg.norm(betas[i] - betas[j])
                    for i in range(4)
                    for j in range(i + 1, 4)
                )
            )
        assert spreads[1] < spreads[0] / 3

    def test_error_names_offending_group(self, rng):
        col = rng.normal(size=(6, 1))
        good = GroupSample("fine", rng.normal(size=(6, 2)), rng.normal(size=6))
        bad = GroupSample("broken", np.hstack([col, col]), rng.normal(size=6))
        with pytest.raises(SingularityError, match="broken"):
            group_summaries(GroupedDataset((good, bad)), "square")
