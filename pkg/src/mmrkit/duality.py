"""Population-level duals and geometric certificates.

For linear regression with a common positive definite second-moment
matrix, the min-max-regret problem is a minimal enclosing ellipsoid
problem and its dual is a concave QP over the simplex; the maximin
explained variance is the min-norm point of the coefficient hull.  For
canonical-link GLMs with a shared covariate sample, the same picture
holds in the conjugate space: the dual solves a minimal Bregman ball
enclosing the covariate-response covariances, whose center maps back to
the primal solution through the conjugate gradient.

These routines require the homogeneous geometry (one Sigma, one
covariate sample); the primal solvers in :mod:`mmrkit.solvers` handle
heterogeneous designs but give no enclosure certificate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, DataError, DomainError, LossMismatchError
from .families import GlmFamily
from .local_fit import LocalFit
from .numerics import project_simplex, require_symmetric, solve_simplex_qp, spd_solve, symmetrize

SUPPORT_REL_TOL = 1e-6
CONJUGATE_TOL = 1e-11
CONJUGATE_MAX_ITER = 4000
CONJUGATE_ESCAPE = 1e3


@dataclass(frozen=True)
class DualSolution:
    """Dual-side geometry of a min-max problem.

    ``center`` is the enclosing-set center (primal coefficient for the
    linear cases, the conjugate center for GLM); ``theta_star`` is always
    the primal coefficient.  ``slacks`` are the per-group enclosure
    residuals, nonnegative up to roundoff when the certificate holds.
    """

    kind: str
    gamma_star: np.ndarray
    center: np.ndarray
    theta_star: np.ndarray
    radius_sq: float
    supporting_set: tuple[int, ...]
    slacks: np.ndarray

    @property
    def positive_weight_set(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.gamma_star > 1e-9))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "gamma_star": [float(v) for v in self.gamma_star],
            "center": [float(v) for v in self.center],
            "theta_star": [float(v) for v in self.theta_star],
            "radius_sq": float(self.radius_sq),
            "supporting_set": list(self.supporting_set),
            "positive_weight_set": list(self.positive_weight_set),
            "slacks": [float(v) for v in self.slacks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _as_beta_matrix(betas) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(betas, dtype=float))
    if arr.ndim != 2:
        raise ValueError("betas must be a K-by-p array")
    return arr


def mmr_dual_lm(betas, sigma) -> DualSolution:
    """Dual min-max-regret solve for linear regression with common Sigma.

    Maximizes ``sum_k g_k ||b_k||^2_S - ||sum_k g_k b_k||^2_S`` over the
    simplex.  The optimizer's convex aggregation of the coefficients is
    the minimal enclosing ellipsoid center; the optimum value is the
    squared radius and equals the min-max regret.
    """
    betas = _as_beta_matrix(betas)
    sigma = require_symmetric(sigma, "sigma")
    spd_solve(sigma, np.zeros(sigma.shape[0]))  # PD check
    gram = symmetrize(betas @ sigma @ betas.T)
    q = np.diag(gram).copy()
    qp = solve_simplex_qp(q, 2.0 * gram)
    gamma = qp.weights
    center = betas.T @ gamma
    radius_sq = float(q @ gamma - center @ sigma @ center)
    diffs = betas - center
    distances = np.einsum("ki,ij,kj->k", diffs, sigma, diffs)
    support = tuple(int(k) for k in np.flatnonzero(distances >= radius_sq * (1.0 - SUPPORT_REL_TOL)))
    return DualSolution(
        kind="mmr-lm",
        gamma_star=gamma,
        center=center,
        theta_star=center,
        radius_sq=radius_sq,
        supporting_set=support,
        slacks=radius_sq - distances,
    )


def mmv_dual_lm(betas, sigma) -> DualSolution:
    """Dual maximin-explained-variance solve: min-norm point of the hull.

    Minimizes ``||sum_k g_k b_k||^2_S`` over the simplex; the optimum is
    the max-min explained variance and the coefficients all lie in the
    half-space ``{u: u' S theta >= V*}``.
    """
    betas = _as_beta_matrix(betas)
    sigma = require_symmetric(sigma, "sigma")
    spd_solve(sigma, np.zeros(sigma.shape[0]))
    gram = symmetrize(betas @ sigma @ betas.T)
    qp = solve_simplex_qp(np.zeros(betas.shape[0]), 2.0 * gram)
    gamma = qp.weights
    center = betas.T @ gamma
    value = float(center @ sigma @ center)
    margins = betas @ sigma @ center
    support = tuple(
        int(k) for k in np.flatnonzero(margins <= value * (1.0 + SUPPORT_REL_TOL) + 1e-9)
    )
    return DualSolution(
        kind="mmv-lm",
        gamma_star=gamma,
        center=center,
        theta_star=center,
        radius_sq=value,
        supporting_set=support,
        slacks=margins - value,
    )


class EmpiricalCumulant:
    """The averaged cumulant A(theta) = mean A(x_i' theta) over a covariate sample.

    Serves as the distance-generating function for the GLM geometry:
    value, gradient, and Hessian are empirical means over the rows.
    """

    def __init__(self, X, family: GlmFamily):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataError("covariate sample must be a nonempty 2-D array")
        if np.linalg.matrix_rank(X.T @ X) < X.shape[1]:
            raise DataError("covariate sample is rank deficient")
        self.X = X
        self.family = family

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def value(self, theta) -> float:
        return float(np.mean(self.family.cumulant(self.X @ theta)))

    def grad(self, theta) -> np.ndarray:
        return self.X.T @ self.family.mean(self.X @ theta) / self.X.shape[0]

    def hess(self, theta) -> np.ndarray:
        weights = self.family.variance(self.X @ theta)
        return symmetrize((self.X * weights[:, None]).T @ self.X) / self.X.shape[0]


def bregman_div(cumulant: EmpiricalCumulant, theta0, theta1) -> float:
    """Bregman divergence A(t1) - A(t0) - <grad A(t0), t1 - t0>.

    Asymmetric distance of ``theta1`` relative to ``theta0``; zero iff
    the two coincide, by strict convexity.
    """
    theta0 = np.asarray(theta0, dtype=float).ravel()
    theta1 = np.asarray(theta1, dtype=float).ravel()
    return cumulant.value(theta1) - cumulant.value(theta0) - float(
        cumulant.grad(theta0) @ (theta1 - theta0)
    )


def conjugate_eval(cumulant: EmpiricalCumulant, mu, init=None) -> tuple[float, np.ndarray]:
    """Convex conjugate A*(mu) = sup_theta <theta, mu> - A(theta), with argmax.

    Newton ascent on the strictly concave objective; the returned argmax
    is the conjugate gradient at ``mu``.  Raises :class:`DomainError`
    when the iterates run away, which means ``mu`` is outside the
    interior of the gradient range (the supremum is not attained).
    """
    mu = np.asarray(mu, dtype=float).ravel()
    if not np.all(np.isfinite(mu)):
        raise ValueError("mu must be finite")
    theta = np.zeros(cumulant.p) if init is None else np.asarray(init, dtype=float).copy()
    scale = 1.0 + float(np.max(np.abs(mu)))

    def objective_at(point):
        return float(point @ mu) - cumulant.value(point)

    def out_of_domain():
        raise DomainError(
            "conjugate iterates diverged: mu is outside the interior of the "
            "gradient range of the cumulant"
        )

    objective = objective_at(theta)
    for _ in range(CONJUGATE_MAX_ITER):
        grad = mu - cumulant.grad(theta)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= CONJUGATE_TOL * scale:
            # the gradient also vanishes along an escape ray when mu sits on
            # the boundary of the gradient range; a scaled-up point must not
            # improve the objective if the supremum is attained here
            if objective_at(2.0 * theta) > objective + 1e-12 * (1.0 + abs(objective)):
                out_of_domain()
            return objective, theta
        if np.linalg.norm(theta) > CONJUGATE_ESCAPE:
            out_of_domain()
        direction = spd_solve(cumulant.hess(theta), grad)
        step = 1.0
        accepted = False
        for _ in range(60):
            candidate = theta + step * direction
            cand_obj = objective_at(candidate)
            # strict increase only: equality at float resolution is a null
            # step and must fall through to the gradient-contraction branch
            if np.isfinite(cand_obj) and cand_obj > objective:
                theta, objective = candidate, cand_obj
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # quadratic phase: objective improvements fall below float
            # resolution before the gradient does; accept the full Newton
            # step on gradient contraction instead
            candidate = theta + direction
            cand_grad = float(np.max(np.abs(mu - cumulant.grad(candidate))))
            if np.isfinite(cand_grad) and cand_grad < 0.5 * grad_norm:
                theta, objective = candidate, objective_at(candidate)
            else:
                raise ConvergenceError("conjugate line search failed", best=theta)
    raise ConvergenceError(
        f"conjugate Newton did not converge in {CONJUGATE_MAX_ITER} iterations", best=theta
    )


def _conjugate_divergences(cumulant, mus, conj_values, mu_bar, theta_bar):
    """D_{A*}(mu_bar || mu_k) for all k, given the argmax at mu_bar."""
    value_bar = float(theta_bar @ mu_bar) - cumulant.value(theta_bar)
    return np.array(
        [
            conj_values[k] - value_bar - float(theta_bar @ (mus[k] - mu_bar))
            for k in range(len(conj_values))
        ]
    ), value_bar


def _glm_dual_objective(cumulant, mus, conj_values, gamma, warm):
    mu_bar = mus.T @ gamma
    value_bar, theta_bar = conjugate_eval(cumulant, mu_bar, init=warm)
    return float(conj_values @ gamma) - value_bar, mu_bar, theta_bar


def _polish_support(cumulant, mus, conj_values, gamma, theta_bar):
    """Newton solve of the support KKT system for the GLM dual.

    On the current support the stationarity condition is
    ``A*(mu_k) - theta_bar' mu_k = lam`` for all k, plus the sum-to-one
    constraint; the Jacobian uses the conjugate Hessian (inverse primal
    Hessian at theta_bar).
    """
    k_total = len(conj_values)
    support = np.flatnonzero(gamma > 1e-9)
    for _ in range(50):
        gam_s = gamma[support]
        mu_bar = mus.T @ gamma
        _, theta_bar = conjugate_eval(cumulant, mu_bar, init=theta_bar)
        grad = conj_values[support] - mus[support] @ theta_bar
        lam = float(gam_s @ grad)
        resid = grad - lam
        if float(np.max(np.abs(resid))) <= 1e-12 * (1.0 + abs(lam)):
            break
        hess_inv_m = np.linalg.solve(cumulant.hess(theta_bar), mus[support].T)
        jac = -(mus[support] @ hess_inv_m)
        s = len(support)
        kkt = np.zeros((s + 1, s + 1))
        kkt[:s, :s] = jac - 1e-13 * (1.0 + np.max(np.abs(jac))) * np.eye(s)
        kkt[:s, s] = -1.0
        kkt[s, :s] = 1.0
        rhs = np.concatenate([-resid + 0.0, [0.0]])
        try:
            delta = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            break
        new_gam = gam_s + delta[:s]
        if np.any(new_gam < 0.0):
            # shrink to the boundary and drop the blocking coordinate
            steps = np.where(delta[:s] < 0.0, -gam_s / np.minimum(delta[:s], -1e-300), np.inf)
            alpha = float(np.min(steps))
            if not np.isfinite(alpha):
                break
            new_gam = np.maximum(gam_s + alpha * delta[:s], 0.0)
            gamma = np.zeros(k_total)
            gamma[support] = new_gam
            gamma /= gamma.sum()
            support = np.flatnonzero(gamma > 1e-9)
            continue
        gamma = np.zeros(k_total)
        gamma[support] = new_gam
        total = gamma.sum()
        if total <= 0:
            break
        gamma /= total
    return gamma, theta_bar


def mmr_dual_glm(mus, cumulant: EmpiricalCumulant) -> DualSolution:
    """Dual GLM min-max-regret: minimal Bregman ball over conjugate coefficients.

    Maximizes ``sum_k g_k A*(mu_k) - A*(sum_k g_k mu_k)`` over the
    simplex by projected gradient ascent with backtracking, followed by
    a Newton polish on the active support.  The optimal center in the
    conjugate space maps to the primal solution via the conjugate
    gradient.
    """
    mus = _as_beta_matrix(mus)
    K = mus.shape[0]
    conj = [conjugate_eval(cumulant, mus[k]) for k in range(K)]
    conj_values = np.array([c[0] for c in conj])
    betas = np.stack([c[1] for c in conj])
    if K == 1:
        return DualSolution(
            kind="mmr-glm",
            gamma_star=np.ones(1),
            center=mus[0].copy(),
            theta_star=betas[0],
            radius_sq=0.0,
            supporting_set=(0,),
            slacks=np.zeros(1),
        )
    gamma = np.full(K, 1.0 / K)
    objective, mu_bar, theta_bar = _glm_dual_objective(cumulant, mus, conj_values, gamma, None)
    for _ in range(4):
        step = 1.0
        for _ in range(5000):
            grad = conj_values - mus @ theta_bar
            lam = float(gamma @ grad)
            viol = max(
                float(np.max(np.abs(grad[gamma > 1e-12] - lam))) if np.any(gamma > 1e-12) else 0.0,
                float(np.max(grad - lam)),
            )
            if viol <= 1e-9 * (1.0 + abs(lam)):
                break
            improved = False
            while step > 1e-14:
                candidate = project_simplex(gamma + step * grad)
                cand_obj, cand_mu, cand_theta = _glm_dual_objective(
                    cumulant, mus, conj_values, candidate, theta_bar
                )
                if cand_obj >= objective - 1e-15 * (1.0 + abs(objective)):
                    gamma, objective, mu_bar, theta_bar = candidate, cand_obj, cand_mu, cand_theta
                    improved = True
                    step *= 1.6
                    break
                step *= 0.5
            if not improved:
                break
        gamma, theta_bar = _polish_support(cumulant, mus, conj_values, gamma, theta_bar)
        objective, mu_bar, theta_bar = _glm_dual_objective(
            cumulant, mus, conj_values, gamma, theta_bar
        )
        grad = conj_values - mus @ theta_bar
        lam = float(gamma @ grad)
        if float(np.max(grad - lam)) <= 1e-8 * (1.0 + abs(lam)):
            break
    value_bar, theta_bar = conjugate_eval(cumulant, mu_bar, init=theta_bar)
    radius_sq = float(conj_values @ gamma) - value_bar
    divergences, _ = _conjugate_divergences(cumulant, mus, conj_values, mu_bar, theta_bar)
    support = tuple(
        int(k) for k in np.flatnonzero(divergences >= radius_sq * (1.0 - SUPPORT_REL_TOL))
    )
    return DualSolution(
        kind="mmr-glm",
        gamma_star=gamma,
        center=mu_bar,
        theta_star=theta_bar,
        radius_sq=radius_sq,
        supporting_set=support,
        slacks=radius_sq - divergences,
    )


@dataclass(frozen=True)
class MethodDegeneration:
    method: str
    degenerate: bool
    group_id: str | None
    margin: float


@dataclass(frozen=True)
class DegenerationReport:
    gdro: MethodDegeneration
    mmv: MethodDegeneration
    mmr: MethodDegeneration

    def to_dict(self) -> dict:
        return {
            m.method: {
                "degenerate": m.degenerate,
                "group_id": m.group_id,
                "margin": m.margin,
            }
            for m in (self.gdro, self.mmv, self.mmr)
        }


def check_degeneration(summaries: list[LocalFit], homogeneity_tol: float = 1e-8) -> DegenerationReport:
    """Evaluate the degeneration conditions for GDRO, MMV, and MMR.

    With ``D[k, j] = ||b_j - b_k||^2_{Sigma_k}``: GDRO collapses to group
    j when its unexplained variance dominates every other group's by the
    corresponding distance; MMV collapses when its explained variance is
    dominated by that much; MMR collapses only under homogeneity of the
    coefficients, to their common value.
    """
    if any(s.loss != "square" for s in summaries):
        raise LossMismatchError("degeneration conditions apply to square-loss summaries")
    K = len(summaries)
    betas = np.stack([s.beta_hat for s in summaries])
    wuv = np.array([s.wuv for s in summaries])
    wev = np.array([s.wev for s in summaries])
    dist = np.zeros((K, K))
    for k in range(K):
        diff = betas - betas[k]
        dist[k] = np.einsum("ji,il,jl->j", diff, summaries[k].sigma_mat, diff)

    def best_candidate(margins):
        j = int(np.argmax(margins))
        return j, float(margins[j])

    # GDRO: wuv_j >= max_{k != j} (wuv_k + dist[k, j])
    gdro_margins = np.array(
        [
            wuv[j] - max((wuv[k] + dist[k, j]) for k in range(K) if k != j)
            if K > 1
            else np.inf
            for j in range(K)
        ]
    )
    j, margin = best_candidate(gdro_margins)
    gdro = MethodDegeneration("gdro", bool(margin >= -1e-12), summaries[j].group_id if margin >= -1e-12 else None, margin)

    # MMV: wev_j <= min_{k != j} (wev_k - dist[k, j])
    mmv_margins = np.array(
        [
            min((wev[k] - dist[k, j]) for k in range(K) if k != j) - wev[j]
            if K > 1
            else np.inf
            for j in range(K)
        ]
    )
    j, margin = best_candidate(mmv_margins)
    mmv = MethodDegeneration("mmv", bool(margin >= -1e-12), summaries[j].group_id if margin >= -1e-12 else None, margin)

    # MMR: homogeneity of the coefficients
    pairwise = max(
        (float(np.linalg.norm(betas[i] - betas[j])) for i in range(K) for j in range(i + 1, K)),
        default=0.0,
    )
    homogeneous = pairwise <= homogeneity_tol
    mmr = MethodDegeneration(
        "mmr", homogeneous, summaries[0].group_id if homogeneous else None, homogeneity_tol - pairwise
    )
    return DegenerationReport(gdro=gdro, mmv=mmv, mmr=mmr)
