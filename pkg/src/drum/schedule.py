"""Variance-preserving diffusion math: schedule, forward kernel, Tweedie
estimate, score/noise conversions, deterministic reverse steps and the
forward re-noising kernel.

Convention: continuous time t in [0, 1], where t=0 is clean data and t=1 is
pure noise.  The forward marginal is q(x_t | x_0) = N(alpha_t x_0,
sigma_t^2 I) with alpha_t^2 + sigma_t^2 = 1 for all t.

Times are clamped to [T_LOW, T_HIGH] wherever a schedule coefficient appears
in a denominator; the exact endpoints snap to (1, 0) and (0, 1) so that the
variance-preserving identity holds exactly there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateTimeError,
    InvalidArgumentError,
    ScheduleInconsistencyError,
)

# Safe time range for operations that divide by alpha_t or sigma_t.
T_LOW = 1e-4
T_HIGH = 1.0 - 1e-4

# Clip bounds for the Tweedie estimate: the nominal data range [-1, 1] plus
# slack so that guidance can overshoot mildly without blowing up.
TWEEDIE_CLIP = (-1.2, 1.2)


def clamp_time(t: float) -> float:
    """Clamp t into the division-safe range [T_LOW, T_HIGH]."""
    return min(max(float(t), T_LOW), T_HIGH)


class CosineSchedule:
    """Cosine variance-preserving schedule.

    alpha(t) = cos(pi t / 2),  sigma(t) = sin(pi t / 2)

    The trigonometric identity makes alpha^2 + sigma^2 = 1 hold to machine
    precision at every t; the endpoints are snapped exactly.
    """

    kind = "cosine"

    def alpha(self, t):
        t = self._check(t)
        a = np.cos(0.5 * np.pi * t)
        a = np.where(t == 0.0, 1.0, np.where(t == 1.0, 0.0, a))
        return float(a) if np.ndim(t) == 0 else a

    def sigma(self, t):
        t = self._check(t)
        s = np.sin(0.5 * np.pi * t)
        s = np.where(t == 0.0, 0.0, np.where(t == 1.0, 1.0, s))
        return float(s) if np.ndim(t) == 0 else s

    def log_snr(self, t):
        """log(alpha^2 / sigma^2); +inf at t=0 and -inf at t=1."""
        t = self._check(t)
        with np.errstate(divide="ignore"):
            out = 2.0 * (np.log(np.abs(self.alpha(t))) - np.log(np.abs(self.sigma(t))))
        return float(out) if np.ndim(t) == 0 else out

    @staticmethod
    def _check(t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise InvalidArgumentError(f"diffusion time must lie in [0, 1], got {t}")
        return t


NoiseSchedule = CosineSchedule  # only schedule family supported

DEFAULT_SCHEDULE = CosineSchedule()


@dataclass(frozen=True)
class StateSample:
    """A diffusion state: tensor plus the time it lives at.

    ``data`` is normally (C, H, W) with C=2 (range, reflectance) but any
    shape is accepted; a leading batch axis is the common extension.
    """

    data: np.ndarray
    t: float

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0):
            raise InvalidArgumentError(f"state time {self.t} outside [0, 1]")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("state tensor contains non-finite entries")


def alpha_sigma(schedule: CosineSchedule, t: float) -> tuple[float, float]:
    """Schedule coefficients (alpha_t, sigma_t) as python floats."""
    return schedule.alpha(t), schedule.sigma(t)


def forward_noise(x0: np.ndarray, t: float, eps: np.ndarray,
                  schedule: CosineSchedule = DEFAULT_SCHEDULE) -> StateSample:
    """Diffuse clean data to time t: alpha_t * x0 + sigma_t * eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise InvalidArgumentError(
            f"noise shape {eps.shape} does not match data shape {x0.shape}")
    a, s = alpha_sigma(schedule, t)
    return StateSample(a * x0 + s * eps, float(t))


def tweedie(x: StateSample, eps_hat: np.ndarray,
            schedule: CosineSchedule = DEFAULT_SCHEDULE,
            clip: tuple[float, float] = TWEEDIE_CLIP) -> np.ndarray:
    """Posterior-mean estimate of x_0: clip((x_t - sigma_t eps_hat) / alpha_t).

    Raises DegenerateTimeError at the pure-noise endpoint where alpha_t = 0.
    """
    a, s = alpha_sigma(schedule, x.t)
    if a == 0.0:
        raise DegenerateTimeError(f"Tweedie estimate undefined at t={x.t} (alpha=0)")
    est = (x.data - s * np.asarray(eps_hat)) / a
    return np.clip(est, clip[0], clip[1])


def eps_to_score(eps_hat: np.ndarray, t: float,
                 schedule: CosineSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Convert a noise prediction into the score: s = -eps / sigma_t."""
    s = schedule.sigma(t)
    if s == 0.0:
        raise DegenerateTimeError(f"score undefined at t={t} (sigma=0)")
    return -np.asarray(eps_hat) / s


def score_to_eps(score: np.ndarray, t: float,
                 schedule: CosineSchedule = DEFAULT_SCHEDULE) -> np.ndarray:
    """Inverse of :func:`eps_to_score`: eps = -sigma_t * score."""
    return -schedule.sigma(t) * np.asarray(score)


def ddim_step(x: StateSample, eps_cond: np.ndarray, s: float,
              schedule: CosineSchedule = DEFAULT_SCHEDULE,
              clip: tuple[float, float] = TWEEDIE_CLIP) -> StateSample:
    """Deterministic reverse step from x.t down to s < x.t.

    x_s = alpha_s * x_hat + sigma_s * eps_cond, where x_hat is the clipped
    Tweedie estimate under eps_cond (which may carry guidance).
    """
    if not s < x.t:
        raise InvalidArgumentError(f"reverse step requires s < t, got s={s}, t={x.t}")
    x_hat = tweedie(x, eps_cond, schedule, clip)
    a_s, s_s = alpha_sigma(schedule, s)
    return StateSample(a_s * x_hat + s_s * np.asarray(eps_cond), float(s))


def renoise(x: StateSample, t: float, rng: np.random.Generator,
            schedule: CosineSchedule = DEFAULT_SCHEDULE) -> StateSample:
    """Forward transition kernel from the current time s = x.t up to t > s.

    x_t = (alpha_t/alpha_s) x_s + sqrt(sigma_t^2 - (alpha_t/alpha_s)^2 sigma_s^2) eps

    Composing this with q(x_s | x_0) reproduces the marginal q(x_t | x_0)
    exactly, which is what the harmonization loop relies on.
    """
    s = x.t
    if not t > s:
        raise InvalidArgumentError(f"re-noising requires t > s, got t={t}, s={s}")
    a_s, s_s = alpha_sigma(schedule, s)
    a_t, s_t = alpha_sigma(schedule, t)
    if a_s == 0.0:
        raise DegenerateTimeError(f"re-noising undefined from s={s} (alpha=0)")
    ratio = a_t / a_s
    radicand = s_t * s_t - ratio * ratio * s_s * s_s
    if radicand < 0.0:
        if radicand < -1e-12:
            raise ScheduleInconsistencyError(
                f"negative transition variance {radicand} for s={s}, t={t}")
        radicand = 0.0
    eps = rng.standard_normal(x.data.shape, dtype=x.data.dtype) \
        if x.data.dtype in (np.float32, np.float64) else rng.standard_normal(x.data.shape)
    return StateSample(ratio * x.data + np.sqrt(radicand) * eps, float(t))


def time_grid(num_steps: int) -> np.ndarray:
    """Uniform reverse-time grid: num_steps+1 nodes from T_LOW up to T_HIGH."""
    if num_steps < 2:
        raise InvalidArgumentError(f"need at least 2 steps, got {num_steps}")
    return np.linspace(T_LOW, T_HIGH, num_steps + 1)
