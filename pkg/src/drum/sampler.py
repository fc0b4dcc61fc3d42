"""The full translation pipeline: noised initialization from the simulation
input, a guided deterministic reverse loop with harmonization resampling,
and label-consistent finalization.

Phases per sample:
  1. initialize: diffuse the observation y up to t_init (low-frequency
     content of y seeds the reverse process);
  2. reverse loop over the uniform time grid below t_init; every step whose
     start time t satisfies t < t_init uses the masked conditional
     prediction and is expanded into (resample_cycles + 1) reverse steps
     interleaved with resample_cycles forward re-noising jumps;
  3. collapse the final state to t=0 through its Tweedie estimate;
  4. finalize: re-initialize the range channel from y wherever the final
     raydrop mask is 1, leaving generated raydrop pixels dropped.

Everything is deterministic given the RNG streams.  Batched states share
the time grid but consume per-sample RNG streams, so each sample's noise
sequence is independent of how samples are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .guidance import (
    GuidanceConfig,
    ReflectanceZeroingOperator,
    guided_eps,
    progressive_mask,
)
from .lidar import RangeImage, denormalize, normalize
from .models.base import ScoreModel
from .schedule import (
    DEFAULT_SCHEDULE,
    StateSample,
    clamp_time,
    ddim_step,
    forward_noise,
    renoise,
    time_grid,
    tweedie,
)

RngOrRngs = np.random.Generator | Sequence[np.random.Generator]


@dataclass(frozen=True)
class SamplerConfig:
    t_init: float = 0.8
    num_steps: int = 32
    resample_cycles: int = 3
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.t_init <= 1.0:
            raise InvalidArgumentError(f"t_init must lie in (0, 1], got {self.t_init}")
        if self.num_steps < 2:
            raise InvalidArgumentError("num_steps must be at least 2")
        if self.resample_cycles < 0:
            raise InvalidArgumentError("resample_cycles must be non-negative")


@dataclass(frozen=True)
class StepDiagnostic:
    t: float
    s: float
    residual_norm: np.ndarray  # per sample
    mask_fill: np.ndarray      # per sample


@dataclass(frozen=True)
class TensorTranslation:
    """Translation result in the normalized tensor domain."""

    x0: np.ndarray          # generated sample, shape of the input
    mask0: np.ndarray       # final raydrop mask, (..., 1, H, W)
    finalized: np.ndarray   # label-consistent output
    digest: list[StepDiagnostic]
    failed: np.ndarray      # per-sample bool
    failed_step: np.ndarray  # first bad step per sample, -1 if none


@dataclass(frozen=True)
class TranslationResult:
    """Translation result as metric-unit range images."""

    x0: RangeImage
    mask0: np.ndarray
    finalized: RangeImage
    digest: list[StepDiagnostic]


def _noise_like(data: np.ndarray, rng: RngOrRngs) -> np.ndarray:
    """Fresh standard normal; per-sample generators draw their own block."""
    dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.float64
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(data.shape, dtype=dtype)
    if len(rng) != data.shape[0]:
        raise InvalidArgumentError(
            f"{len(rng)} RNG streams for a batch of {data.shape[0]}")
    return np.stack([g.standard_normal(data.shape[1:], dtype=dtype) for g in rng])


def initialize_from_sim(y: np.ndarray, t_init: float,
                        schedule=DEFAULT_SCHEDULE,
                        rng: RngOrRngs | None = None) -> StateSample:
    """Diffuse the observation up to t_init (clamped into the safe range)."""
    y = np.asarray(y)
    if np.any(y[..., 1, :, :] != 0.0):
        raise InvalidArgumentError(
            "simulation input must have a zeroed reflectance channel")
    rng = rng if rng is not None else np.random.default_rng(0)
    t0 = clamp_time(t_init)
    return forward_noise(y, t0, _noise_like(y, rng), schedule)


def finalize_normalized(x0: np.ndarray, y: np.ndarray, eta: float,
                        mask: np.ndarray | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Label-consistency pass in normalized units.

    Valid pixels (mask 1) copy the simulation range bit for bit and keep the
    generated reflectance; raydrop pixels get the sentinel in both channels.
    """
    m = progressive_mask(x0, eta) if mask is None else mask
    keep = m[..., 0, :, :] > 0
    out_range = np.where(keep, y[..., 0, :, :], x0.dtype.type(-1.0))
    out_refl = np.where(keep, x0[..., 1, :, :], x0.dtype.type(-1.0))
    return np.stack([out_range, out_refl], axis=-3), m


def finalize_sample(x0: RangeImage, y: RangeImage, eta: float) -> RangeImage:
    """Metric-unit finalization: mask from the generated sample's normalized
    range, simulation ranges re-applied at valid pixels."""
    if x0.range.shape != y.range.shape:
        raise InvalidArgumentError("sample and simulation shapes differ")
    m = progressive_mask(normalize(x0), eta)[0] > 0
    out_range = np.where(m, y.range, np.float32(-1.0))
    out_refl = np.where(m, x0.reflectance, np.float32(0.0))
    return RangeImage(out_range, out_refl, y.intrinsics)


def _sanitize(x: StateSample, failed: np.ndarray, failed_step: np.ndarray,
              step_index: int, batched: bool) -> StateSample:
    """Zero out samples that went non-finite and record the step."""
    data = x.data
    finite = np.isfinite(data)
    finite = finite.all(axis=tuple(range(1, data.ndim))) if batched else \
        np.array([finite.all()])
    newly = ~finite & ~failed
    if newly.any():
        data = data.copy()
        if batched:
            data[newly] = 0.0
        else:
            data[...] = 0.0
        failed |= newly
        failed_step[newly] = step_index
        return StateSample(data, x.t)
    return x


def harmonized_step(x: StateSample, s: float, y: np.ndarray,
                    model: ScoreModel, operator: ReflectanceZeroingOperator,
                    cfg: SamplerConfig, rng: RngOrRngs,
                    schedule=DEFAULT_SCHEDULE
                    ) -> tuple[StateSample, StepDiagnostic]:
    """One guided step t -> s expanded into a harmonization loop:
    (resample_cycles + 1) reverse steps interleaved with resample_cycles
    forward re-noising jumps s -> t, every reverse step conditioned."""
    t = x.t
    if not s < t:
        raise InvalidArgumentError(f"harmonized step requires s < t, got {s} >= {t}")
    if t > cfg.t_init:
        raise InvalidArgumentError(
            f"harmonization only runs in the guided phase (t={t} > t_init={cfg.t_init})")
    info = None
    x_s = x
    for cycle in range(cfg.resample_cycles + 1):
        eps_cond, info = guided_eps(x, y, model, operator, cfg.guidance, schedule)
        x_s = ddim_step(x, eps_cond, s, schedule)
        if cycle < cfg.resample_cycles:
            x = renoise(x_s, t, rng, schedule)
    diag = StepDiagnostic(t=t, s=s, residual_norm=np.atleast_1d(info["residual_norm"]),
                          mask_fill=np.atleast_1d(info["mask_fill"]))
    return x_s, diag


def translate_tensor(y: np.ndarray, model: ScoreModel,
                     operator: ReflectanceZeroingOperator, cfg: SamplerConfig,
                     schedule=DEFAULT_SCHEDULE, rng: RngOrRngs | None = None,
                     on_failure: str = "raise",
                     trace: list | None = None) -> TensorTranslation:
    """Run the full pipeline on a normalized observation tensor.

    ``y`` is (2, H, W) or (B, 2, H, W) with a zeroed reflectance channel.
    ``on_failure`` is "raise" (abort on the first non-finite state, with
    the step index) or "mark" (zero the affected sample, flag it in the
    result and keep going -- the batch-isolation mode).
    """
    if on_failure not in ("raise", "mark"):
        raise InvalidArgumentError(f"unknown failure policy {on_failure!r}")
    y = np.asarray(y)
    single = y.ndim == 3
    batch = 1 if single else y.shape[0]
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    x = initialize_from_sim(y, cfg.t_init, schedule, rng)
    if trace is not None:
        trace.append(x.data.copy())

    failed = np.zeros(batch, dtype=bool)
    failed_step = np.full(batch, -1, dtype=np.int64)
    digest: list[StepDiagnostic] = []
    nodes = time_grid(cfg.num_steps)
    first = int(np.searchsorted(nodes, x.t, side="left")) - 1

    def fail_check(step_index: int, state: StateSample) -> StateSample:
        state = _sanitize(state, failed, failed_step, step_index, not single)
        if on_failure == "raise" and failed.any():
            raise NumericFailureError(
                f"non-finite state at step {step_index}", step=step_index)
        return state

    unguided = GuidanceConfig(eta=cfg.guidance.eta, guidance_scale=0.0,
                              mask_mode=cfg.guidance.mask_mode)
    step_index = 0
    for k in range(first, -1, -1):
        s = float(nodes[k])
        t_cur = x.t
        if t_cur < cfg.t_init:
            x, diag = harmonized_step(x, s, y, model, operator, cfg, rng, schedule)
        else:
            eps_cond, info = guided_eps(x, y, model, operator, unguided, schedule)
            x = ddim_step(x, eps_cond, s, schedule)
            diag = StepDiagnostic(t=t_cur, s=s,
                                  residual_norm=np.atleast_1d(info["residual_norm"]),
                                  mask_fill=np.atleast_1d(info["mask_fill"]))
        digest.append(diag)
        x = fail_check(step_index, x)
        if trace is not None:
            trace.append(x.data.copy())
        step_index += 1

    # Collapse to t=0: the Tweedie estimate under the final conditional
    # prediction is exactly the s=0 limit of the deterministic step.
    eps_fin, _ = guided_eps(x, y, model, operator, cfg.guidance, schedule)
    x0 = tweedie(x, eps_fin, schedule)
    if trace is not None:
        trace.append(x0.copy())

    if cfg.guidance.mask_mode == "all-ones":
        mask0 = np.ones_like(x0[..., :1, :, :])
        finalized, _ = finalize_normalized(x0, y, cfg.guidance.eta, mask=mask0)
    else:
        finalized, mask0 = finalize_normalized(x0, y, cfg.guidance.eta)
    return TensorTranslation(x0=x0, mask0=mask0, finalized=finalized,
                             digest=digest, failed=failed, failed_step=failed_step)


def drum_translate(y: RangeImage, model: ScoreModel,
                   operator: ReflectanceZeroingOperator | None = None,
                   cfg: SamplerConfig | None = None,
                   schedule=DEFAULT_SCHEDULE,
                   rng: np.random.Generator | None = None) -> TranslationResult:
    """Translate one simulation range image into a pseudo-real image."""
    operator = operator if operator is not None else ReflectanceZeroingOperator()
    cfg = cfg if cfg is not None else SamplerConfig()
    y_obs = operator.apply(normalize(y))
    core = translate_tensor(y_obs, model, operator, cfg, schedule, rng,
                            on_failure="raise")
    x0_img = denormalize(core.x0, y.intrinsics)
    keep = core.mask0[0] > 0
    finalized = RangeImage(
        np.where(keep, y.range, np.float32(-1.0)),
        np.where(keep, x0_img.reflectance, np.float32(0.0)),
        y.intrinsics)
    return TranslationResult(x0=x0_img, mask0=core.mask0[0],
                             finalized=finalized, digest=core.digest)


# ---------------------------------------------------------------------------
# baselines (the ablation ladder: plain SDEdit and unmasked guidance)
# ---------------------------------------------------------------------------

def sdedit_translate(y: np.ndarray, model: ScoreModel, cfg: SamplerConfig,
                     schedule=DEFAULT_SCHEDULE,
                     rng: RngOrRngs | None = None,
                     trace: list | None = None) -> np.ndarray:
    """Plain SDEdit: noised initialization plus unconditional reverse steps."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = initialize_from_sim(np.asarray(y), cfg.t_init, schedule, rng)
    if trace is not None:
        trace.append(x.data.copy())
    nodes = time_grid(cfg.num_steps)
    for k in range(int(np.searchsorted(nodes, x.t, side="left")) - 1, -1, -1):
        x = ddim_step(x, model.predict_eps(x.data, x.t), float(nodes[k]), schedule)
        if trace is not None:
            trace.append(x.data.copy())
    x0 = tweedie(x, model.predict_eps(x.data, x.t), schedule)
    if trace is not None:
        trace.append(x0.copy())
    return x0


def pigdm_translate(y: np.ndarray, model: ScoreModel,
                    operator: ReflectanceZeroingOperator, cfg: SamplerConfig,
                    schedule=DEFAULT_SCHEDULE,
                    rng: RngOrRngs | None = None,
                    trace: list | None = None) -> np.ndarray:
    """Unmasked pseudoinverse guidance from pure noise: guidance applied at
    every pixel on every step, no harmonization."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    gcfg = GuidanceConfig(eta=cfg.guidance.eta,
                          jacobian_mode=cfg.guidance.jacobian_mode,
                          guidance_scale=cfg.guidance.guidance_scale,
                          mask_mode="all-ones")
    y = np.asarray(y)
    x = initialize_from_sim(y, 1.0, schedule, rng)
    if trace is not None:
        trace.append(x.data.copy())
    nodes = time_grid(cfg.num_steps)
    for k in range(int(np.searchsorted(nodes, x.t, side="left")) - 1, -1, -1):
        eps_cond, _ = guided_eps(x, y, model, operator, gcfg, schedule)
        x = ddim_step(x, eps_cond, float(nodes[k]), schedule)
        if trace is not None:
            trace.append(x.data.copy())
    eps_cond, _ = guided_eps(x, y, model, operator, gcfg, schedule)
    x0 = tweedie(x, eps_cond, schedule)
    if trace is not None:
        trace.append(x0.copy())
    return x0
