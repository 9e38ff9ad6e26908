import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmrkit.exceptions import NonPsdError, SingularityError
from mmrkit.numerics import (
    max_eigenvalue,
    project_simplex,
    solve_simplex_qp,
    spd_solve,
)

from conftest import (
    adjugate_inverse,
    charpoly_max_eigenvalue,
    grid_max_qp,
    grid_max_qp_refined,
    simplex_grid,
)


class TestProjectSimplex:
    def test_already_feasible(self):
        assert_allclose(project_simplex([0.3, 0.7]), [0.3, 0.7], atol=1e-15)

    def test_vertex(self):
        assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0], atol=1e-15)

    def test_negative_coordinate_vs_grid(self):
        # dense grid over the 2-simplex minimizing squared distance
        v = np.array([0.5, 0.5, -1.0])
        grid = simplex_grid(3, 1e-3)
        best = grid[np.argmin(np.sum((grid - v) ** 2, axis=1))]
        proj = project_simplex(v)
        assert_allclose(proj, [0.5, 0.5, 0.0], atol=1e-12)
        assert np.linalg.norm(proj - best) <= 2e-3

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            project_simplex(np.array([]))

    def test_idempotent_and_lipschitz(self, rng):
        for _ in range(200):
            k = rng.integers(1, 8)
            v = rng.normal(size=k) * 3
            w = rng.normal(size=k) * 3
            pv, pw = project_simplex(v), project_simplex(w)
            assert_allclose(project_simplex(pv), pv, atol=1e-14)
            assert np.linalg.norm(pv - pw) <= np.linalg.norm(v - w) + 1e-12
            assert pv.min() >= 0.0
            assert abs(pv.sum() - 1.0) <= 1e-12


class TestSpdSolve:
    def test_identity(self, rng):
        b = rng.normal(size=4)
        assert_allclose(spd_solve(np.eye(4), b), b, atol=1e-14)

    def test_diagonal(self):
        assert_allclose(spd_solve(np.diag([2.0, 4.0]), [2.0, 8.0]), [1.0, 2.0], atol=1e-14)

    def test_random_pd_vs_adjugate(self, rng):
        for _ in range(20):
            a = rng.normal(size=(5, 5))
            mat = a @ a.T + 0.5 * np.eye(5)
            b = rng.normal(size=5)
            x = spd_solve(mat, b)
            assert_allclose(x, adjugate_inverse(mat) @ b, rtol=1e-8)
            assert np.max(np.abs(mat @ x - b)) <= 1e-10 * (1 + np.max(np.abs(b)))

    def test_non_pd_raises(self):
        with pytest.raises(SingularityError):
            spd_solve(np.diag([1.0, -1.0]), [1.0, 1.0])
        with pytest.raises(SingularityError):
            spd_solve(np.ones((2, 2)), [1.0, 1.0])


class TestMaxEigenvalue:
    def test_diagonal(self):
        assert max_eigenvalue(np.diag([1.0, 3.0, 2.0])) == pytest.approx(3.0, rel=1e-10)

    def test_rank_one(self, rng):
        u = rng.normal(size=5)
        u *= np.sqrt(7.0) / np.linalg.norm(u)
        assert max_eigenvalue(np.outer(u, u)) == pytest.approx(7.0, rel=1e-9)

    def test_random_vs_charpoly(self, rng):
        for _ in range(30):
            a = rng.normal(size=(4, 4))
            mat = (a + a.T) / 2.0
            assert max_eigenvalue(mat, tol=1e-10) == pytest.approx(
                charpoly_max_eigenvalue(mat), rel=1e-7, abs=1e-9
            )

    def test_negative_spectrum(self):
        assert max_eigenvalue(-np.diag([1.0, 2.0])) == pytest.approx(-1.0, rel=1e-9)

    def test_zero(self):
        assert max_eigenvalue(np.zeros((3, 3))) == 0.0


def _check_kkt(q, hmat, result, tol):
    grad = q - hmat @ result.weights
    lam = result.kkt_multiplier
    for k, w in enumerate(result.weights):
        if w > 0:
            assert abs(grad[k] - lam) <= tol
        else:
            assert grad[k] <= lam + tol


class TestSolveSimplexQp:
    def test_symmetric_pair(self):
        res = solve_simplex_qp(np.zeros(2), np.eye(2))
        assert_allclose(res.weights, [0.5, 0.5], atol=1e-12)

    def test_linear_objective_vertex(self):
        res = solve_simplex_qp(np.array([1.0, 0.0]), np.zeros((2, 2)))
        assert_allclose(res.weights, [1.0, 0.0], atol=1e-15)

    def test_linear_tie_uniform(self):
        res = solve_simplex_qp(np.array([2.0, 2.0, 0.0]), np.zeros((3, 3)))
        assert_allclose(res.weights, [0.5, 0.5, 0.0], atol=1e-15)

    def test_interior_vs_fine_grid(self):
        # grid over the 1-simplex at step 1e-5
        q = np.array([1.0, 0.5])
        t = np.linspace(0.0, 1.0, 100001)
        grid = np.column_stack([t, 1.0 - t])
        vals = grid @ q - 0.5 * np.einsum("ij,ij->i", grid, grid)
        best = grid[np.argmax(vals)]
        res = solve_simplex_qp(q, np.eye(2))
        assert_allclose(res.weights, [0.75, 0.25], atol=1e-10)
        assert np.linalg.norm(res.weights - best) <= 2e-5

    def test_single_coordinate(self, rng):
        for _ in range(10):
            q = rng.normal(size=1)
            h = np.abs(rng.normal(size=(1, 1)))
            res = solve_simplex_qp(q, h)
            assert_allclose(res.weights, [1.0])

    def test_non_psd_raises(self):
        with pytest.raises(NonPsdError):
            solve_simplex_qp(np.zeros(2), np.diag([1.0, -1.0]))

    def test_matches_grid_small_k(self, rng):
        for trial in range(40):
            k = int(rng.integers(2, 5))
            a = rng.normal(size=(k, k))
            hmat = a @ a.T
            q = rng.normal(size=k) * 2
            res = solve_simplex_qp(q, hmat)
            _check_kkt(q, hmat, res, 1e-9)
            if k <= 3:
                _, grid_val = grid_max_qp(q, hmat, 1e-3 if k == 2 else 2e-3)
            else:
                _, grid_val = grid_max_qp_refined(q, hmat, 2e-2, 1e-3)
            assert res.objective >= grid_val - 1e-9
            assert res.objective - grid_val <= 1e-2

    def test_invariants(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 9))
            a = rng.normal(size=(k, k))
            hmat = a @ a.T * rng.uniform(0, 3)
            q = rng.normal(size=k) * 5
            res = solve_simplex_qp(q, hmat)
            assert res.weights.min() >= 0.0
            assert abs(res.weights.sum() - 1.0) <= 1e-12
            _check_kkt(q, hmat, res, 1e-8)

    def test_psd_singular(self):
        # rank-1 H with a flat optimal face
        hmat = np.ones((3, 3))
        q = np.array([1.0, 1.0, 1.0])
        res = solve_simplex_qp(q, hmat)
        _check_kkt(q, hmat, res, 1e-9)
        assert res.objective == pytest.approx(0.5, abs=1e-10)
