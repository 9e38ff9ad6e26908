"""Canonical-link loss families and the plain square loss.

A family is the scalar strictly convex cumulant ``A`` together with its
first two derivatives.  The pointwise loss of a coefficient vector on an
observation (x, y) is ``A(x't) - y x't``; its gradient in the coefficient
is ``x (A'(x't) - y)``.  The square loss ``(y - x't)^2`` is kept separate
because the linear-regression pipeline uses it unscaled, so that regrets
equal squared Mahalanobis distances exactly; the gaussian family equals
half the square loss up to a per-point constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "GlmFamily",
    "get_family",
    "family_eval",
    "pointwise_loss",
    "square_loss",
    "FAMILY_TAGS",
]


@dataclass(frozen=True)
class GlmFamily:
    """A canonical-link family: tag plus vectorized A, A', A''."""

    tag: str
    cumulant: Callable[[np.ndarray], np.ndarray]
    mean: Callable[[np.ndarray], np.ndarray]
    variance: Callable[[np.ndarray], np.ndarray]


def _gaussian_cumulant(eta):
    return 0.5 * np.square(eta)


def _gaussian_mean(eta):
    return np.asarray(eta, dtype=float)


def _gaussian_variance(eta):
    return np.ones_like(np.asarray(eta, dtype=float))


def _logistic_cumulant(eta):
    # max(eta, 0) + log1p(exp(-|eta|)): stable for |eta| up to ~700
    eta = np.asarray(eta, dtype=float)
    return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))


def _logistic_mean(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    expe = np.exp(eta[~pos])
    out[~pos] = expe / (1.0 + expe)
    return out


def _logistic_variance(eta):
    mean = _logistic_mean(eta)
    return mean * (1.0 - mean)


def _poisson_cumulant(eta):
    return np.exp(np.asarray(eta, dtype=float))


_FAMILIES = {
    "gaussian": GlmFamily("gaussian", _gaussian_cumulant, _gaussian_mean, _gaussian_variance),
    "logistic": GlmFamily("logistic", _logistic_cumulant, _logistic_mean, _logistic_variance),
    "poisson": GlmFamily("poisson", _poisson_cumulant, _poisson_cumulant, _poisson_cumulant),
}

FAMILY_TAGS = tuple(_FAMILIES)


def get_family(tag: str) -> GlmFamily:
    """Look up a family by its string tag: gaussian | logistic | poisson."""
    try:
        return _FAMILIES[tag]
    except KeyError:
        raise ValueError(f"unknown family {tag!r}; expected one of {FAMILY_TAGS}") from None


def family_eval(family: GlmFamily, eta: float) -> tuple[float, float, float]:
    """Evaluate (A, A', A'') at a single finite linear predictor value."""
    if not np.isfinite(eta):
        raise ValueError(f"eta must be finite, got {eta}")
    return (
        float(family.cumulant(eta)),
        float(family.mean(eta)),
        float(family.variance(eta)),
    )


def _check_dims(theta, x):
    theta = np.asarray(theta, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if theta.shape != x.shape:
        raise ValueError(f"dimension mismatch: theta has {theta.size}, x has {x.size}")
    return theta, x


def pointwise_loss(family: GlmFamily, theta, x, y) -> tuple[float, np.ndarray]:
    """Loss A(x't) - y x't and its gradient x (A'(x't) - y) at one point."""
    theta, x = _check_dims(theta, x)
    eta = float(x @ theta)
    value = float(family.cumulant(eta)) - y * eta
    gradient = x * (float(family.mean(eta)) - y)
    return value, gradient


def square_loss(theta, x, y) -> tuple[float, np.ndarray]:
    """Square loss (y - x't)^2 and gradient -2 x (y - x't) at one point."""
    theta, x = _check_dims(theta, x)
    resid = y - float(x @ theta)
    return resid * resid, -2.0 * resid * x
