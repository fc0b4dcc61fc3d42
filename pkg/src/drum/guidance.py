"""Conditional-score machinery: the reflectance-zeroing measurement
operator, the guidance standard deviation, pseudoinverse guidance and the
progressive raydrop mask that gates it.

The conditional noise prediction is assembled as

    eps_cond = eps_hat - sigma_t * (m_t * g),
    g        = (scale / r_t^2) * [v^T d(x_hat)/d(x_t)]^T,
    v        = pinv(H) y - pinv(H) H x_hat,

so that pixels with m_t = 0 keep the unconditional prediction bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTimeError, InvalidArgumentError
from .models.base import ScoreModel
from .schedule import DEFAULT_SCHEDULE, StateSample, alpha_sigma, tweedie

RANGE_CHANNEL = 0
REFLECTANCE_CHANNEL = 1

JACOBIAN_MODES = ("exact-vjp", "identity-approx")
MASK_MODES = ("progressive", "all-ones")


class ReflectanceZeroingOperator:
    """Linear corruption H that zeroes the reflectance channel.

    H is a coordinate-selection projector, so its Moore-Penrose
    pseudoinverse and the projector pinv(H) H all coincide with H itself;
    the three methods are kept distinct because callers use them in
    different roles.
    """

    kind = "zero-reflectance"

    @staticmethod
    def _zero_reflectance(x: np.ndarray) -> np.ndarray:
        y = np.array(x, copy=True)
        y[..., REFLECTANCE_CHANNEL, :, :] = 0.0
        return y

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward corruption: keep range, zero reflectance."""
        return self._zero_reflectance(x)

    def pinv_apply(self, y: np.ndarray) -> np.ndarray:
        """Moore-Penrose pseudoinverse applied to an observation."""
        return self._zero_reflectance(y)

    def projector(self, x: np.ndarray) -> np.ndarray:
        """pinv(H) H: orthogonal projector onto the observed subspace."""
        return self._zero_reflectance(x)


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = -0.3
    jacobian_mode: str = "exact-vjp"
    guidance_scale: float = 1.0
    mask_mode: str = "progressive"

    def __post_init__(self):
        if not -1.0 <= self.eta <= 1.0:
            raise InvalidArgumentError(f"eta must lie in [-1, 1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise InvalidArgumentError("guidance_scale must be non-negative")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise InvalidArgumentError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise InvalidArgumentError(f"unknown mask_mode {self.mask_mode!r}")


def r_schedule(t: float, schedule=DEFAULT_SCHEDULE) -> float:
    """Guidance standard deviation r_t with r_t^2 = sigma^2/(alpha^2+sigma^2).

    Under the variance-preserving identity this equals sigma_t; the general
    form is kept so the relation stays correct if the identity ever drifts.
    """
    a, s = alpha_sigma(schedule, t)
    return float(np.sqrt(s * s / (a * a + s * s)))


def progressive_mask(x_hat: np.ndarray, eta: float) -> np.ndarray:
    """Raydrop-aware mask from the range channel of a Tweedie estimate.

    m = 1 where the normalized range strictly exceeds eta, else 0 (values
    exactly at the threshold count as raydrop).  Shape (..., 1, H, W),
    broadcastable over both channels.
    """
    rng_ch = x_hat[..., RANGE_CHANNEL:RANGE_CHANNEL + 1, :, :]
    return (rng_ch > eta).astype(x_hat.dtype)


def _check_observation(y: np.ndarray):
    if np.any(y[..., REFLECTANCE_CHANNEL, :, :] != 0.0):
        raise InvalidArgumentError(
            "observation must have a zeroed reflectance channel (apply H first)")


def guided_eps(x: StateSample, y: np.ndarray, model: ScoreModel,
               operator: ReflectanceZeroingOperator, cfg: GuidanceConfig,
               schedule=DEFAULT_SCHEDULE) -> tuple[np.ndarray, dict]:
    """Fused conditional prediction: one model forward shared between the
    noise prediction, the mask and the guidance VJP.

    Returns (eps_cond, info); info carries the Tweedie estimate, mask,
    per-sample residual norm and mask fill ratio for diagnostics.
    """
    _check_observation(y)
    a, s = alpha_sigma(schedule, x.t)
    r2 = s * s / (a * a + s * s)
    if r2 == 0.0:
        raise DegenerateTimeError(f"guidance undefined at t={x.t} (r_t=0)")

    need_vjp = cfg.guidance_scale != 0.0 and cfg.jacobian_mode == "exact-vjp"
    if need_vjp:
        eps_hat, vjp = model.eps_with_tweedie_vjp(x.data, x.t)
    else:
        eps_hat = model.predict_eps(x.data, x.t)
        vjp = None

    x_hat = tweedie(x, eps_hat, schedule)
    if cfg.mask_mode == "all-ones":
        mask = np.ones_like(x_hat[..., :1, :, :])
    else:
        mask = progressive_mask(x_hat, cfg.eta)

    residual = operator.pinv_apply(y) - operator.projector(x_hat)
    sum_axes = tuple(range(residual.ndim - 3, residual.ndim))
    info = {
        "x_hat": x_hat,
        "mask": mask,
        "residual_norm": np.sqrt((residual * residual).sum(axis=sum_axes)),
        "mask_fill": mask.mean(axis=sum_axes),
    }

    if cfg.guidance_scale == 0.0 or not mask.any():
        return eps_hat, info

    if cfg.jacobian_mode == "identity-approx":
        jv = residual / a
    else:
        jv = vjp(residual)
    grad = (cfg.guidance_scale / r2) * jv
    return eps_hat - s * (mask * grad), info


def pigdm_gradient(x: StateSample, y: np.ndarray, model: ScoreModel,
                   operator: ReflectanceZeroingOperator, cfg: GuidanceConfig,
                   schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Pseudoinverse guidance: the gradient of log p(y | x_t) wrt x_t,
    scaled by guidance_scale.  Unmasked; masking happens in
    :func:`masked_conditional_eps`.
    """
    _check_observation(y)
    a, s = alpha_sigma(schedule, x.t)
    r2 = s * s / (a * a + s * s)
    if r2 == 0.0:
        raise DegenerateTimeError(f"guidance undefined at t={x.t} (r_t=0)")
    if cfg.guidance_scale == 0.0:
        return np.zeros_like(x.data)

    eps_hat, vjp = model.eps_with_tweedie_vjp(x.data, x.t)
    x_hat = tweedie(x, eps_hat, schedule)
    residual = operator.pinv_apply(y) - operator.projector(x_hat)
    if cfg.jacobian_mode == "identity-approx":
        jv = residual / a
    else:
        jv = vjp(residual)
    return (cfg.guidance_scale / r2) * jv


def masked_conditional_eps(x: StateSample, y: np.ndarray, model: ScoreModel,
                           operator: ReflectanceZeroingOperator,
                           cfg: GuidanceConfig,
                           schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Conditional noise prediction with raydrop-aware masked guidance."""
    eps_cond, _ = guided_eps(x, y, model, operator, cfg, schedule)
    return eps_cond
