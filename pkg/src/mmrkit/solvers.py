"""The four estimators over a grouped dataset: MMR, GDRO, pooled ERM, MMV.

MMR, GDRO, and MMV all run the same linearization scheme: at the current
iterate, collect each group's criterion value and gradient, solve

    maximize  q'g - (1/(2L)) g'G'G g   over the simplex,

and step along -G g / L.  The three methods differ only in the per-group
criterion: regret (risk minus the within-sample minimized risk) for MMR,
raw risk for GDRO, and negated explained variance for MMV.  Stopping is
by a primal-dual gap: the worst criterion value minus the lower bound
q'g - ||G g||^2 / (2 mu) obtained from mu-strong convexity of the group
criteria (for the nonconvex logistic MMV the same quantity with mu = L
is used as a stationarity measure instead of a bound).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import GroupedDataset, GroupSample
from .exceptions import ConvergenceError, LossMismatchError
from .families import GlmFamily, get_family
from .local_fit import (
    LocalFit,
    empirical_regret,
    glm_hessian,
    glm_newton,
    glm_risk_grad,
    group_summaries,
    least_squares,
    loss_tag,
    resolve_loss,
)
from .numerics import max_eigenvalue, solve_simplex_qp, symmetrize

MAX_L_DOUBLINGS = 60


class _EngineRun:
    __slots__ = ("theta", "gamma", "trace", "converged", "iterations", "vals", "L", "doublings")

    def __init__(self, theta, gamma, trace, converged, iterations, vals, L, doublings):
        self.theta = theta
        self.gamma = gamma
        self.trace = trace
        self.converged = converged
        self.iterations = iterations
        self.vals = vals
        self.L = L
        self.doublings = doublings


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the linearized min-max solvers.

    ``L=None`` estimates the linearization constant from the data (exact
    for the square loss, local with adaptive doubling for GLMs).
    """

    L: float | None = None
    T_max: int = 5000
    gap_tol: float = 1e-8
    qp_tol: float = 1e-10
    step_tol: float = 1e-13

    def __post_init__(self):
        if self.L is not None and self.L <= 0:
            raise ValueError("L must be positive when set")
        if self.gap_tol < 0:
            raise ValueError("gap_tol must be nonnegative")


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    objective: float
    step_norm: float
    gap: float
    L: float
    theta: np.ndarray


@dataclass(frozen=True)
class FitResult:
    method: str
    theta_hat: np.ndarray
    gamma_hat: np.ndarray | None
    per_group_regret: np.ndarray
    objective: float
    trace: tuple[TraceStep, ...]
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta_hat": [float(v) for v in self.theta_hat],
            "gamma_hat": None if self.gamma_hat is None else [float(v) for v in self.gamma_hat],
            "objective": float(self.objective),
            "per_group_regret": [float(v) for v in self.per_group_regret],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class _SquareStats:
    """Vectorized square-loss risk/gradient evaluation from group moments."""

    def __init__(self, summaries):
        self.sigmas = np.stack([s.sigma_mat for s in summaries])
        self.mus = np.stack([s.mu_hat for s in summaries])
        self.y2 = np.array([s.y2_mean for s in summaries])
        self.wmrs = np.array([s.wmr for s in summaries])

    def risks_grads(self, theta):
        sig_theta = self.sigmas @ theta
        risks = theta @ sig_theta.T - 2.0 * self.mus @ theta + self.y2
        grads = 2.0 * (sig_theta - self.mus).T
        return risks, grads

    def mu_constant(self):
        return 2.0 * min(float(np.min(np.linalg.eigvalsh(s))) for s in self.sigmas)

    def lipschitz(self):
        return 2.0 * max(max_eigenvalue(s) for s in self.sigmas)


def _glm_mu_constant(family, dataset, theta):
    mu = np.inf
    for g in dataset.groups:
        hessian = glm_hessian(family, g.X, theta)
        mu = min(mu, float(np.min(np.linalg.eigvalsh(hessian))))
    return max(mu, 0.0)


def estimate_lipschitz(dataset: GroupedDataset, loss, theta=None) -> float:
    """Gradient-Lipschitz constant for the per-group risks.

    Square loss: exactly ``2 max_k lmax(Sigma_k)``, valid globally.  GLM:
    the largest Hessian eigenvalue across groups at the reference point
    (default zero), inflated by 1.1; the solver doubles it adaptively if
    the quadratic model is ever caught underestimating a group criterion.
    """
    loss = resolve_loss(loss)
    if isinstance(loss, str):
        best = 0.0
        for g in dataset.groups:
            best = max(best, 2.0 * max_eigenvalue(symmetrize(g.X.T @ g.X) / g.n))
        return best
    theta = np.zeros(dataset.p) if theta is None else np.asarray(theta, dtype=float)
    best = 0.0
    for g in dataset.groups:
        best = max(best, max_eigenvalue(glm_hessian(loss, g.X, theta)))
    return 1.1 * max(best, 1e-12)


def _linearized_minmax(values_grads, theta0, L, mu_of_theta, opts: SolverOptions, convex=True):
    """Algorithm core shared by MMR/GDRO/MMV; returns (theta, gamma, trace, converged, iters).

    ``values_grads(theta) -> (vals, grads)`` with vals length-K and grads
    p-by-K.  ``mu_of_theta`` supplies the strong-convexity constant used
    in the dual lower bound; for nonconvex criteria pass None and the
    gap degrades to a stationarity measure based on L.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    vals, grads = values_grads(theta)
    trace = []
    doublings = 0
    converged = False
    gamma = None
    iteration = 0
    while iteration < opts.T_max:
        iteration += 1
        qp = solve_simplex_qp(vals, symmetrize(grads.T @ grads) / L, opts.qp_tol)
        gamma = qp.weights
        combined = grads @ gamma
        if convex:
            mu = mu_of_theta(theta)
            curvature = mu if mu > 0 else None
        else:
            curvature = L
        primal = float(np.max(vals))
        if curvature is not None:
            gap = primal - (float(vals @ gamma) - float(combined @ combined) / (2.0 * curvature))
        else:
            gap = np.inf
        step = combined / L
        step_norm = float(np.linalg.norm(step))
        trace.append(TraceStep(iteration, primal, step_norm, gap, L, theta.copy()))
        if gap <= opts.gap_tol or step_norm <= opts.step_tol * (1.0 + float(np.linalg.norm(theta))):
            converged = True
            break
        candidate = theta - step
        new_vals, new_grads = values_grads(candidate)
        # quadratic upper model per group: vals_k + g_k'(-step) + (L/2)||step||^2
        model = vals - grads.T @ step + 0.5 * L * step_norm**2
        slack = 1e-10 * (1.0 + np.abs(vals))
        if np.any(new_vals > model + slack):
            if doublings >= MAX_L_DOUBLINGS:
                raise ConvergenceError(
                    "linearization constant doubled past its cap without a valid model",
                    best=theta,
                )
            L *= 2.0
            doublings += 1
            continue
        theta = candidate
        vals, grads = new_vals, new_grads
    if not converged:
        # iteration cap reached after an update: refresh the dual weight at
        # the final iterate so the returned pair is mutually consistent
        vals, grads = values_grads(theta)
        qp = solve_simplex_qp(vals, symmetrize(grads.T @ grads) / L, opts.qp_tol)
        gamma = qp.weights
    return _EngineRun(theta, gamma, tuple(trace), converged, iteration, vals, L, doublings)


def _result_from_run(method, run, regrets, diagnostics):
    return FitResult(
        method=method,
        theta_hat=run.theta,
        gamma_hat=run.gamma,
        per_group_regret=np.asarray(regrets, dtype=float),
        objective=float(np.max(run.vals)),
        trace=run.trace,
        converged=run.converged,
        iterations=run.iterations,
        diagnostics=diagnostics,
    )


def _pooled_theta(dataset: GroupedDataset, loss):
    loss = resolve_loss(loss)
    X, y = dataset.concatenated()
    pooled = GroupSample("__pooled__", X, y)
    if isinstance(loss, str):
        return least_squares(pooled)
    return glm_newton(pooled, loss)


def _square_engine_inputs(dataset, summaries, subtract):
    stats = _SquareStats(summaries)
    offsets = stats.wmrs if subtract == "wmr" else (stats.y2 if subtract == "y2" else 0.0)

    def values_grads(theta):
        risks, grads = stats.risks_grads(theta)
        return risks - offsets, grads

    return values_grads, (lambda theta: stats.mu_constant()), stats.lipschitz()


def _glm_engine_inputs(dataset, family, summaries, subtract_wmr):
    wmrs = np.array([s.wmr for s in summaries]) if subtract_wmr else 0.0

    def values_grads(theta):
        vals = np.empty(dataset.K)
        grads = np.empty((dataset.p, dataset.K))
        for k, g in enumerate(dataset.groups):
            risk, grad = glm_risk_grad(family, g.X, g.y, theta)
            vals[k] = risk
            grads[:, k] = grad
        return vals - wmrs, grads

    return values_grads, (lambda theta: _glm_mu_constant(family, dataset, theta))


def _run_minmax(method, dataset, loss, opts, subtract_wmr):
    loss = resolve_loss(loss)
    summaries = group_summaries(dataset, loss)
    try:
        theta0 = _pooled_theta(dataset, loss).beta_hat
    except ConvergenceError:
        theta0 = np.zeros(dataset.p)  # pooled fit can fail even when MMR is well posed
    if isinstance(loss, str):
        values_grads, mu_fn, auto_L = _square_engine_inputs(
            dataset, summaries, "wmr" if subtract_wmr else None
        )
    else:
        values_grads, mu_fn = _glm_engine_inputs(dataset, loss, summaries, subtract_wmr)
        auto_L = estimate_lipschitz(dataset, loss, theta0)
    L = opts.L if opts.L is not None else auto_L
    run = _linearized_minmax(values_grads, theta0, L, mu_fn, opts)
    regrets = [
        empirical_regret(run.theta, s, g, loss)[0] for s, g in zip(summaries, dataset.groups)
    ]
    return _result_from_run(
        method, run, regrets,
        diagnostics={"L": run.L, "l_doublings": run.doublings, "loss": loss_tag(loss)},
    )


def fit_mmr(dataset: GroupedDataset, loss, opts: SolverOptions = SolverOptions()) -> FitResult:
    """Empirical min-max-regret fit by the linearization method.

    Minimizes the worst per-group empirical regret.  The returned
    ``gamma_hat`` is the dual simplex weight from the final subproblem
    and ``objective`` the worst regret at the solution.
    """
    return _run_minmax("mmr", dataset, loss, opts, subtract_wmr=True)


def fit_gdro(dataset: GroupedDataset, loss, opts: SolverOptions = SolverOptions()) -> FitResult:
    """Group-DRO fit: the same iteration as MMR on raw per-group risks."""
    return _run_minmax("gdro", dataset, loss, opts, subtract_wmr=False)


def fit_pooled(dataset: GroupedDataset, loss) -> FitResult:
    """Single ERM over the concatenated sample (implicit weights n_k / n)."""
    loss = resolve_loss(loss)
    summaries = group_summaries(dataset, loss)
    pooled = _pooled_theta(dataset, loss)
    theta = pooled.beta_hat
    regrets = [empirical_regret(theta, s, g, loss)[0] for s, g in zip(summaries, dataset.groups)]
    sizes = np.array([g.n for g in dataset.groups], dtype=float)
    return FitResult(
        method="pooled",
        theta_hat=theta,
        gamma_hat=None,
        per_group_regret=np.asarray(regrets),
        objective=float(pooled.wmr),
        trace=(),
        converged=True,
        iterations=0,
        diagnostics={"implicit_weights": (sizes / sizes.sum()).tolist(), "loss": loss_tag(loss)},
    )


def _logistic_neg_ev_inputs(dataset, family):
    """Values/grads for the revised logistic explained-variance criterion."""
    variances = [float(np.var(g.y)) for g in dataset.groups]

    def values_grads(theta):
        vals = np.empty(dataset.K)
        grads = np.empty((dataset.p, dataset.K))
        for k, g in enumerate(dataset.groups):
            eta = g.X @ theta
            pred = family.mean(eta)
            resid = g.y - pred
            vals[k] = float(resid @ resid / g.n) - variances[k]
            grads[:, k] = -2.0 * g.X.T @ (resid * family.variance(eta)) / g.n
        return vals, grads

    return values_grads


def fit_mmv(dataset: GroupedDataset, loss="square", opts: SolverOptions = SolverOptions()) -> FitResult:
    """Maximin explained variance.

    Square loss: each negated explained variance is a convex quadratic,
    so the linearization converges globally.  Logistic: the revised
    criterion is nonconvex, so the solver multistarts from zero, the
    pooled fit, and every group coefficient, returning the best
    stationary point (ties broken by start order).
    """
    loss = resolve_loss(loss)
    if isinstance(loss, str):
        summaries = group_summaries(dataset, loss)
        values_grads, mu_fn, auto_L = _square_engine_inputs(dataset, summaries, "y2")
        theta0 = _pooled_theta(dataset, loss).beta_hat
        L = opts.L if opts.L is not None else auto_L
        run = _linearized_minmax(values_grads, theta0, L, mu_fn, opts)
        regrets = [
            empirical_regret(run.theta, s, g, loss)[0]
            for s, g in zip(summaries, dataset.groups)
        ]
        return _result_from_run(
            "mmv", run, regrets,
            diagnostics={"L": run.L, "l_doublings": run.doublings, "loss": "square"},
        )
    if loss.tag != "logistic":
        raise ValueError("MMV is defined for the square loss or the logistic family")

    family = loss
    summaries = group_summaries(dataset, family)
    values_grads = _logistic_neg_ev_inputs(dataset, family)
    # global curvature bound for the logistic criterion: |d^2/deta^2
    # (y - A'(eta))^2| <= 2 A''^2 + 2 |y - A'| |A'''| <= 0.625
    auto_L = 0.7 * max(max_eigenvalue(symmetrize(g.X.T @ g.X) / g.n) for g in dataset.groups)
    L = opts.L if opts.L is not None else auto_L
    try:
        pooled_theta = _pooled_theta(dataset, family).beta_hat
    except ConvergenceError:
        pooled_theta = np.zeros(dataset.p)
    starts = [np.zeros(dataset.p), pooled_theta] + [s.beta_hat for s in summaries]
    best = None
    failures = []
    for idx, start in enumerate(starts):
        try:
            run = _linearized_minmax(values_grads, start, L, None, opts, convex=False)
        except ConvergenceError as exc:
            failures.append(f"start {idx}: {exc}")
            continue
        objective = float(np.max(run.vals))
        if not np.isfinite(objective):
            failures.append(f"start {idx}: non-finite objective")
            continue
        if best is None or objective < best[0]:
            best = (objective, idx, run)
    if best is None:
        raise ConvergenceError(
            "logistic MMV failed from every start: " + "; ".join(failures), best=None
        )
    objective, idx, run = best
    regrets = [
        empirical_regret(run.theta, s, g, family)[0]
        for s, g in zip(summaries, dataset.groups)
    ]
    return _result_from_run(
        "mmv", run, regrets,
        diagnostics={
            "L": run.L,
            "l_doublings": run.doublings,
            "loss": "logistic",
            "start_index": idx,
            "starts": len(starts),
        },
    )


def worst_empirical_regret(theta, summaries: list[LocalFit], dataset: GroupedDataset, loss) -> float:
    """Worst per-group empirical regret of ``theta`` across the dataset."""
    if len(summaries) != dataset.K:
        raise LossMismatchError(
            f"{len(summaries)} summaries for {dataset.K} groups"
        )
    return max(
        empirical_regret(theta, s, g, loss)[0] for s, g in zip(summaries, dataset.groups)
    )
