"""Within-group empirical risk minimization and regret evaluation.

Each group is summarized once into a :class:`LocalFit` carrying the
fitted coefficient, the second-moment matrices, and the within-sample
minimized risk (WMR).  Empirical regrets of any candidate coefficient
are then risk differences against that WMR.  For the square loss the
summary also caches the mean squared response, so risks and gradients
come from sufficient statistics without another pass over the rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import GroupedDataset, GroupSample
from .exceptions import ConvergenceError, LossMismatchError, SeparationError, SingularityError
from .families import GlmFamily, get_family
from .numerics import spd_solve, symmetrize

NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 100
NEWTON_MAX_HALVINGS = 50
DIVERGENCE_FACTOR = 1e3


def resolve_loss(loss) -> str | GlmFamily:
    """Normalize a loss selector: 'square' stays a string, tags become families."""
    if isinstance(loss, GlmFamily):
        return loss
    if loss == "square":
        return "square"
    return get_family(loss)


def loss_tag(loss) -> str:
    loss = resolve_loss(loss)
    return loss if isinstance(loss, str) else loss.tag


@dataclass(frozen=True)
class LocalFit:
    """Per-group summary: coefficient, moments, and fit-quality scalars.

    ``wmr`` is the within-sample minimized risk under the summary's loss;
    ``wuv``/``wev`` are always the square-loss unexplained and explained
    variances, kept for degeneration diagnostics even when the fit itself
    is a GLM.
    """

    group_id: str
    beta_hat: np.ndarray
    sigma_mat: np.ndarray
    mu_hat: np.ndarray
    wmr: float
    wuv: float
    wev: float
    n: int
    loss: str
    y2_mean: float

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "beta_hat": [float(v) for v in self.beta_hat],
            "wmr": self.wmr,
            "wuv": self.wuv,
            "wev": self.wev,
            "n": self.n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _moments(sample: GroupSample):
    n = sample.n
    # BLAS products are not bit-symmetric; the numerics layer requires it
    sigma = symmetrize(sample.X.T @ sample.X) / n
    mu = sample.X.T @ sample.y / n
    y2 = float(sample.y @ sample.y / n)
    return sigma, mu, y2


def glm_hessian(family: GlmFamily, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Empirical risk Hessian X' diag(A''(X theta)) X / n, exactly symmetric."""
    weights = family.variance(X @ theta)
    return symmetrize((X * weights[:, None]).T @ X) / X.shape[0]


def least_squares(sample: GroupSample) -> LocalFit:
    """Ordinary least squares on one group via the normal equations."""
    sigma, mu, y2 = _moments(sample)
    try:
        beta = spd_solve(sigma, mu)
    except SingularityError as exc:
        raise SingularityError(f"group {sample.group_id!r}: {exc}") from exc
    resid = sample.y - sample.X @ beta
    wuv = float(resid @ resid / sample.n)
    wev = float(beta @ sigma @ beta)
    return LocalFit(
        group_id=sample.group_id,
        beta_hat=beta,
        sigma_mat=sigma,
        mu_hat=mu,
        wmr=wuv,
        wuv=wuv,
        wev=wev,
        n=sample.n,
        loss="square",
        y2_mean=y2,
    )


def glm_risk_grad(family: GlmFamily, X: np.ndarray, y: np.ndarray, theta: np.ndarray):
    """Mean canonical-link risk and its gradient over one sample."""
    eta = X @ theta
    with np.errstate(over="ignore"):
        values = family.cumulant(eta) - y * eta
    risk = float(np.mean(values))
    grad = X.T @ (family.mean(eta) - y) / X.shape[0]
    return risk, grad


def glm_newton(
    sample: GroupSample,
    family: GlmFamily,
    init: np.ndarray | None = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> LocalFit:
    """Within-group GLM fit by Newton's method with step halving.

    Stops when the mean score is below ``tol`` in the sup norm.  Raises
    :class:`SeparationError` when the iterates run away while the score
    stays large (the empirical risk has no attained minimizer), and
    :class:`ConvergenceError` with the last iterate at the iteration cap.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    X, y = sample.X, sample.y
    n, p = X.shape
    theta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    escape_norm = DIVERGENCE_FACTOR * (1.0 + float(np.linalg.norm(theta)))
    risk, grad = glm_risk_grad(family, X, y, theta)
    # Separated data walk outward about one unit per Newton step, so the
    # norm-escape check needs more steps than the convergence cap allows;
    # after the cap a diagnosis budget keeps stepping only to classify the
    # failure as divergence versus slow convergence.
    budget = max_iter + 20 * max_iter
    for iteration in range(budget):
        score_norm = float(np.max(np.abs(grad)))
        if score_norm <= tol:
            # the score also vanishes along an escape ray (saturated
            # predictions), so confirm the minimum is attained: scaling a
            # true interior minimizer up must increase the risk strictly
            scaled_risk, _ = glm_risk_grad(family, X, y, 2.0 * theta)
            if scaled_risk < risk - 1e-12 * (1.0 + abs(risk)):
                raise SeparationError(
                    f"group {sample.group_id!r}: the risk keeps decreasing as the "
                    "coefficient scale grows; the empirical risk has no minimizer",
                    best=theta,
                )
            break
        if np.linalg.norm(theta) > escape_norm:
            raise SeparationError(
                f"group {sample.group_id!r}: iterates diverged with score {score_norm:.3e}; "
                "the empirical risk appears to have no minimizer",
                best=theta,
            )
        hessian = glm_hessian(family, X, theta)
        try:
            direction = spd_solve(hessian, grad)
        except SingularityError as exc:
            raise SingularityError(f"group {sample.group_id!r}: {exc}") from exc
        step = 1.0
        for _ in range(NEWTON_MAX_HALVINGS):
            candidate = theta - step * direction
            new_risk, new_grad = glm_risk_grad(family, X, y, candidate)
            if np.isfinite(new_risk) and new_risk <= risk:
                accepted = candidate
                break
            step *= 0.5
        else:
            raise ConvergenceError(
                f"group {sample.group_id!r}: line search failed after "
                f"{NEWTON_MAX_HALVINGS} halvings",
                best=theta,
            )
        if iteration >= max_iter and np.linalg.norm(accepted) <= np.linalg.norm(theta):
            # past the cap and not marching outward: genuinely slow, not separated
            raise ConvergenceError(
                f"group {sample.group_id!r}: Newton did not reach score tolerance {tol} "
                f"in {max_iter} iterations",
                best=accepted,
            )
        theta, risk, grad = accepted, new_risk, new_grad
    else:
        raise ConvergenceError(
            f"group {sample.group_id!r}: Newton did not reach score tolerance {tol} "
            f"in {budget} iterations",
            best=theta,
        )

    ls = least_squares(sample)
    sigma, mu, y2 = ls.sigma_mat, ls.mu_hat, ls.y2_mean
    return LocalFit(
        group_id=sample.group_id,
        beta_hat=theta,
        sigma_mat=sigma,
        mu_hat=mu,
        wmr=risk,
        wuv=ls.wuv,
        wev=ls.wev,
        n=n,
        loss=family.tag,
        y2_mean=y2,
    )


def _check_match(fit: LocalFit, sample: GroupSample, loss):
    tag = loss_tag(loss)
    if fit.loss != tag:
        raise LossMismatchError(f"summary was fit with {fit.loss!r}, requested {tag!r}")
    if fit.group_id != sample.group_id or fit.n != sample.n or fit.mu_hat.size != sample.p:
        raise LossMismatchError(
            f"summary for {fit.group_id!r} (n={fit.n}) does not match sample "
            f"{sample.group_id!r} (n={sample.n})"
        )


def empirical_regret(theta, fit: LocalFit, sample: GroupSample, loss):
    """Empirical regret of ``theta`` on one group, with its gradient.

    The regret is the group's empirical risk at ``theta`` minus the
    within-sample minimized risk, so it is nonnegative up to roundoff;
    the gradient is the risk gradient.
    """
    _check_match(fit, sample, loss)
    theta = np.asarray(theta, dtype=float).ravel()
    loss = resolve_loss(loss)
    if isinstance(loss, str):
        risk = float(theta @ fit.sigma_mat @ theta - 2.0 * fit.mu_hat @ theta + fit.y2_mean)
        grad = 2.0 * (fit.sigma_mat @ theta - fit.mu_hat)
    else:
        risk, grad = glm_risk_grad(loss, sample.X, sample.y, theta)
    return risk - fit.wmr, grad


def group_summaries(dataset: GroupedDataset, loss) -> list[LocalFit]:
    """One LocalFit per group, in dataset order."""
    loss = resolve_loss(loss)
    if isinstance(loss, str):
        return [least_squares(g) for g in dataset.groups]
    return [glm_newton(g, loss) for g in dataset.groups]
