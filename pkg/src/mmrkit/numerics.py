"""Dense symmetric linear algebra and simplex-constrained quadratic programming.

Everything here operates on small matrices (group counts and covariate
dimensions in the tens to low hundreds), so exactness matters more than
scalability.  The central routine is :func:`solve_simplex_qp`, which solves

    maximize  q'g - (1/2) g' H g   over the probability simplex,

the weight subproblem appearing inside every linearization step of the
robust solvers and in the dual geometry certificates.  It runs a primal
active-set method with closed-form equality-constrained solves, which
terminates finitely and delivers KKT residuals near machine precision;
a fixed-step projected-gradient loop is kept as a fallback for the rare
degenerate cases where the active-set iteration stalls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import ConvergenceError, NonPsdError, SingularityError

DEFAULT_QP_TOL = 1e-10
QP_ITER_CAP = 100_000
POWER_ITER_CAP = 100_000


@dataclass(frozen=True)
class SimplexQpResult:
    """Solution of a simplex-constrained concave QP.

    ``weights`` lies on the simplex (nonnegative, sums to one within
    1e-12); ``kkt_multiplier`` is the multiplier of the sum-to-one
    constraint, so that (q - H w)_k equals it on the support and does
    not exceed it off the support, both within the requested tolerance.
    """

    weights: np.ndarray
    objective: float
    kkt_multiplier: float
    iterations: int


def require_symmetric(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return ``mat`` as a float array, raising if it is not square symmetric."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    if not np.array_equal(mat, mat.T):
        raise ValueError(f"{name} must be symmetric as stored")
    return mat


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Exact symmetric part 0.5*(M + M')."""
    mat = np.asarray(mat, dtype=float)
    return 0.5 * (mat + mat.T)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-based algorithm; exact up to floating point for any length >= 1.
    """
    v = np.asarray(v, dtype=float).ravel()
    k = v.size
    if k == 0:
        raise ValueError("cannot project a length-0 vector onto a simplex")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, k + 1)
    rho = np.nonzero(u * idx > css)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def spd_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve M x = b for symmetric positive definite M via Cholesky.

    Raises :class:`SingularityError` when the factorization fails or a
    pivot falls below the relative tolerance 1e-12.
    """
    mat = require_symmetric(mat, "spd matrix")
    rhs = np.asarray(rhs, dtype=float)
    scale = float(np.max(np.abs(np.diag(mat)))) if mat.size else 0.0
    try:
        factor = cho_factor(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"matrix is not positive definite: {exc}") from exc
    pivots = np.diag(factor[0])
    if scale == 0.0 or np.min(pivots**2) <= 1e-12 * scale:
        raise SingularityError("matrix is numerically singular (pivot below 1e-12 relative)")
    return cho_solve(factor, rhs, check_finite=False)


def max_eigenvalue(mat: np.ndarray, tol: float = 1e-12) -> float:
    """Largest eigenvalue of a symmetric matrix by shifted power iteration.

    The shift by the infinity norm makes the iterated matrix PSD so the
    dominant eigenvalue of the shifted matrix is the target plus shift,
    which handles indefinite input.  Converges on the Rayleigh quotient
    to relative tolerance ``tol``.
    """
    mat = require_symmetric(mat)
    k = mat.shape[0]
    if k == 1:
        return float(mat[0, 0])
    shift = float(np.max(np.sum(np.abs(mat), axis=1)))
    if shift == 0.0:
        return 0.0
    shifted = mat + shift * np.eye(k)
    # deterministic start, slightly tilted so it is not orthogonal to the
    # dominant eigenvector of structured inputs
    v = 1.0 + 1.0 / (2.0 + np.arange(k))
    v /= np.linalg.norm(v)
    rayleigh = float(v @ shifted @ v)
    prev_delta = None
    for _ in range(POWER_ITER_CAP):
        w = shifted @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # shifted matrix annihilates v: spectrum is {-shift} along v
            return float(-shift)
        v = w / norm
        new_rayleigh = float(v @ shifted @ v)
        delta = new_rayleigh - rayleigh
        rayleigh = new_rayleigh
        estimate = rayleigh - shift
        if delta <= 0.0:
            return estimate
        # Rayleigh error decays geometrically; extrapolate the remaining gap
        # from the observed contraction ratio instead of trusting one step.
        if prev_delta is not None and prev_delta > 0.0:
            ratio = min(delta / prev_delta, 1.0)
            if ratio < 1.0:
                remaining = delta * ratio / (1.0 - ratio)
                if remaining <= tol * max(abs(estimate), 2.3e-16 * shift):
                    return estimate
        prev_delta = delta
    raise ConvergenceError(
        f"power iteration did not converge in {POWER_ITER_CAP} iterations",
        best=rayleigh - shift,
    )


def _kkt_residuals(q, hmat, weights):
    """Return (lambda, support violation, bound violation) for the QP KKT system."""
    grad = q - hmat @ weights
    lam = float(weights @ grad)
    on_support = weights > 0.0
    support_viol = float(np.max(np.abs(grad[on_support] - lam))) if np.any(on_support) else 0.0
    off = ~on_support
    bound_viol = float(np.max(grad[off] - lam)) if np.any(off) else 0.0
    return lam, support_viol, max(bound_viol, 0.0)


def _finalize_weights(weights):
    weights = np.maximum(weights, 0.0)
    total = weights.sum()
    if total <= 0.0:
        raise ConvergenceError("simplex QP produced a zero weight vector", best=weights)
    return weights / total


def _qp_objective(q, hmat, weights):
    return float(q @ weights - 0.5 * weights @ hmat @ weights)


def _solve_eqp(q, hmat, free, ridge):
    """Equality-constrained solve on the free index set.

    Stationarity with the sum-to-one multiplier:
        (H_FF + ridge I) g_F + lam 1 = q_F,   1' g_F = 1.
    The tiny ridge keeps the KKT system nonsingular for PSD-singular H;
    it perturbs the first-order residual by at most ridge * max(g).
    """
    f = free.sum()
    kkt = np.zeros((f + 1, f + 1))
    kkt[:f, :f] = hmat[np.ix_(free, free)] + ridge * np.eye(f)
    kkt[:f, f] = 1.0
    kkt[f, :f] = 1.0
    rhs = np.concatenate([q[free], [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:f], float(sol[f])


def _active_set_qp(q, hmat, tol):
    """Primal active-set iteration; returns (weights, iterations, ok)."""
    k = q.size
    scale = 1.0 + float(np.max(np.abs(hmat)))
    ridge = 1e-13 * scale
    weights = np.full(k, 1.0 / k)
    free = np.ones(k, dtype=bool)
    cap = max(50 * k, 200)
    for iteration in range(1, cap + 1):
        cand = np.zeros(k)
        cand_f, lam = _solve_eqp(q, hmat, free, ridge)
        cand[free] = cand_f
        if np.min(cand[free]) >= -1e-12:
            weights = np.maximum(cand, 0.0)
            grad = q - hmat @ weights
            bound = ~free
            if not np.any(bound):
                return weights, iteration, True
            mult = lam - grad[bound]
            if np.min(mult) >= -tol:
                return weights, iteration, True
            # release the most negative multiplier
            release = np.flatnonzero(bound)[int(np.argmin(mult))]
            free[release] = True
        else:
            # step toward the EQP solution until the first coordinate hits zero
            direction = cand - weights
            shrink = direction < -1e-300
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(shrink, -weights / direction, np.inf)
            ratios[~free] = np.inf
            alpha = float(np.min(ratios))
            blocking = int(np.argmin(ratios))
            alpha = min(max(alpha, 0.0), 1.0)
            weights = weights + alpha * direction
            weights[blocking] = 0.0
            free[blocking] = False
            if not np.any(free):
                # numerical breakdown; restart from the best vertex
                free[int(np.argmax(q))] = True
    return weights, cap, False


def _projected_gradient_qp(q, hmat, weights, tol):
    """Fixed-step projected gradient fallback (step 1/(lmax(H)+1))."""
    lmax = max_eigenvalue(hmat, tol=1e-9) if np.any(hmat) else 0.0
    step = 1.0 / (max(lmax, 0.0) + 1.0)
    best = weights
    best_res = np.inf
    for iteration in range(1, QP_ITER_CAP + 1):
        grad = q - hmat @ weights
        weights = project_simplex(weights + step * grad)
        if iteration % 50 == 0 or iteration == QP_ITER_CAP:
            _, sup, bound = _kkt_residuals(q, hmat, weights)
            res = max(sup, bound)
            if res < best_res:
                best, best_res = weights, res
            if res <= tol:
                return weights, iteration, True
    return best, QP_ITER_CAP, False


def solve_simplex_qp(q: np.ndarray, hmat: np.ndarray, tol: float = DEFAULT_QP_TOL) -> SimplexQpResult:
    """Maximize q'g - 0.5 g'H g over the probability simplex.

    Parameters
    ----------
    q : length-K array of linear coefficients.
    hmat : K-by-K symmetric positive semidefinite matrix.
    tol : KKT tolerance for the returned stationarity certificate.

    Raises
    ------
    NonPsdError
        If H has an eigenvalue below ``-tol`` (relative to its scale).
    ConvergenceError
        If neither the active-set pass nor the projected-gradient
        fallback reaches the KKT tolerance; carries the best iterate.
    """
    q = np.asarray(q, dtype=float).ravel()
    if q.size == 0:
        raise ValueError("simplex QP needs at least one coordinate")
    if tol <= 0:
        raise ValueError("tol must be positive")
    hmat = require_symmetric(hmat, "H")
    if hmat.shape[0] != q.size:
        raise ValueError(f"H is {hmat.shape} but q has length {q.size}")
    k = q.size
    if k == 1:
        weights = np.ones(1)
        return SimplexQpResult(weights, _qp_objective(q, hmat, weights), float(q[0] - hmat[0, 0]), 0)

    scale = 1.0 + float(np.max(np.abs(hmat)))
    min_eig = float(np.min(np.linalg.eigvalsh(hmat)))
    if min_eig < -tol * scale:
        raise NonPsdError(f"H has negative eigenvalue {min_eig:.3e}")

    if not np.any(hmat):
        # pure linear program: uniform weight over the argmax set
        top = q >= np.max(q) - 1e-12 * (1.0 + abs(float(np.max(q))))
        weights = top.astype(float) / top.sum()
        lam, _, _ = _kkt_residuals(q, hmat, weights)
        return SimplexQpResult(weights, _qp_objective(q, hmat, weights), lam, 0)

    weights, iterations, ok = _active_set_qp(q, hmat, tol)
    weights = _finalize_weights(weights)
    lam, sup, bound = _kkt_residuals(q, hmat, weights)
    if not ok or max(sup, bound) > tol:
        weights, extra, ok = _projected_gradient_qp(q, hmat, weights, tol)
        iterations += extra
        weights = _finalize_weights(weights)
        lam, sup, bound = _kkt_residuals(q, hmat, weights)
        if not ok and max(sup, bound) > tol:
            raise ConvergenceError(
                f"simplex QP stalled with KKT residual {max(sup, bound):.3e}",
                best=SimplexQpResult(weights, _qp_objective(q, hmat, weights), lam, iterations),
            )
    return SimplexQpResult(weights, _qp_objective(q, hmat, weights), lam, iterations)
