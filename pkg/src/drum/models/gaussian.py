"""Analytic Gaussian prior: an exact score model used as a verification
oracle for the guided sampler.

For a prior N(mu, diag(tau2)) under the variance-preserving forward kernel,
every quantity the sampler needs has a closed form:

    marginal      x_t ~ N(alpha mu, (alpha^2 tau2 + sigma^2) I)
    eps*(x_t)     = sigma (x_t - alpha mu) / (alpha^2 tau2 + sigma^2)
    x_hat(x_t)    = (alpha tau2 x_t + sigma^2 mu) / (alpha^2 tau2 + sigma^2)
    d x_hat/d x_t = diag(alpha tau2 / (alpha^2 tau2 + sigma^2))

The Jacobian is exact for the unclipped posterior mean; tests that compare
against it keep the estimate inside the clip bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError
from ..schedule import DEFAULT_SCHEDULE, CosineSchedule
from .base import ScoreModel


@dataclass(frozen=True)
class GaussianPrior(ScoreModel):
    """Diagonal Gaussian data prior with mean ``mu`` and variance ``tau2``."""

    mu: np.ndarray
    tau2: np.ndarray
    schedule: CosineSchedule = DEFAULT_SCHEDULE

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "tau2", np.broadcast_to(
            np.asarray(self.tau2, dtype=np.float64), self.mu.shape).copy())
        if np.any(self.tau2 <= 0.0):
            raise InvalidArgumentError("prior variance tau2 must be positive")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64)

    def _coeffs(self, t):
        a = self.schedule.alpha(t)
        s = self.schedule.sigma(t)
        denom = a * a * self.tau2 + s * s
        return a, s, denom

    def posterior_mean(self, x_t: np.ndarray, t) -> np.ndarray:
        """Exact E[x_0 | x_t] (no clipping)."""
        a, s, denom = self._coeffs(t)
        return (a * self.tau2 * x_t + s * s * self.mu) / denom

    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        a, s, denom = self._coeffs(t)
        return s * (x_t - a * self.mu) / denom

    def eps_with_tweedie_vjp(self, x_t, t):
        a, s, denom = self._coeffs(t)
        eps = s * (x_t - a * self.mu) / denom
        jac_diag = a * self.tau2 / denom

        def vjp(v: np.ndarray) -> np.ndarray:
            return np.asarray(v) * jac_diag

        return eps, vjp
