"""Score-model interface used by the guided sampler.

A score model predicts the Gaussian noise eps contained in a diffusion state
x_t and can compute vector-Jacobian products v^T d(x_hat)/d(x_t) through its
own posterior-mean (Tweedie) estimate.  The fused ``eps_with_tweedie_vjp``
entry point exists because guidance needs both quantities per step and the
backward pass can reuse the forward activations.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Callable

import numpy as np


class ScoreModel(ABC):
    """Epsilon-predictor with reverse-mode differentiation support."""

    @property
    @abstractmethod
    def dtype(self) -> np.dtype:
        """Floating dtype of predictions."""

    @abstractmethod
    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        """Predict the noise in x_t; output shape equals input shape."""

    @abstractmethod
    def eps_with_tweedie_vjp(
        self, x_t: np.ndarray, t
    ) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Return (eps_hat, vjp) where vjp(v) = v^T d(x_hat)/d(x_t).

        The Jacobian is taken through this model's own Tweedie estimate,
        including any clipping the model applies to it.
        """

    def tweedie_vjp(self, x_t: np.ndarray, t, v: np.ndarray) -> np.ndarray:
        """Convenience wrapper: v^T d(x_hat)/d(x_t) in one call."""
        _, vjp = self.eps_with_tweedie_vjp(x_t, t)
        return vjp(v)
