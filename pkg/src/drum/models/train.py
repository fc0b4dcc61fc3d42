"""Denoiser training: standard eps-prediction regression.

Draw (x0, t, eps), form x_t = alpha_t x0 + sigma_t eps, and regress the
network output onto eps with a mean-squared loss, t uniform over the
division-safe time range.  Plain SGD with momentum; uniform loss weighting
over t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import InvalidArgumentError, TrainingDivergenceError
from ..schedule import DEFAULT_SCHEDULE, T_HIGH, T_LOW
from .network import NeuralDenoiser


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 8
    lr: float = 0.02
    seed: int = 0
    momentum: float = 0.9
    holdout_frac: float = 0.1

    def __post_init__(self):
        if self.steps < 0 or self.batch <= 0 or self.lr <= 0:
            raise InvalidArgumentError("steps, batch and lr must be positive")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise InvalidArgumentError("holdout_frac must lie in [0, 1)")


def _probe_batch(images: np.ndarray, rng: np.random.Generator, dtype,
                 schedule, draws_per_image: int = 4):
    """Fixed (x_t, t, eps) probes used for deterministic held-out loss."""
    reps = np.repeat(images, draws_per_image, axis=0)
    n = reps.shape[0]
    t = rng.uniform(T_LOW, T_HIGH, n)
    eps = rng.standard_normal(reps.shape).astype(dtype)
    a = schedule.alpha(t).astype(dtype)[:, None, None, None]
    s = schedule.sigma(t).astype(dtype)[:, None, None, None]
    x_t = a * reps.astype(dtype) + s * eps
    return x_t, t, eps


def train_denoiser(dataset: np.ndarray, cfg: TrainConfig,
                   model: NeuralDenoiser | None = None,
                   schedule=DEFAULT_SCHEDULE,
                   log_fn: Callable[[int, float, float], None] | None = None,
                   log_every: int = 200) -> tuple[NeuralDenoiser, dict]:
    """Train (or continue training) an eps-predictor on normalized images.

    ``dataset`` is (N, 2, H, W) in [-1, 1].  Returns the model and a history
    dict with the initial/final held-out losses.  Raises
    TrainingDivergenceError with the offending step if the loss goes
    non-finite.
    """
    dataset = np.asarray(dataset)
    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise InvalidArgumentError("dataset must be a non-empty (N, 2, H, W) array")

    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = NeuralDenoiser(rng=np.random.default_rng(cfg.seed + 1),
                               schedule=schedule)
    dtype = model.dtype

    n = dataset.shape[0]
    perm = rng.permutation(n)
    n_hold = int(round(cfg.holdout_frac * n))
    if n_hold == 0 or n_hold == n:
        train_set = dataset[perm]
        hold_set = dataset[perm[: max(1, min(n, 8))]]
    else:
        hold_set = dataset[perm[:n_hold]]
        train_set = dataset[perm[n_hold:]]

    probe_rng = np.random.default_rng(cfg.seed + 2)
    px, pt, peps = _probe_batch(hold_set[:32], probe_rng, dtype, schedule)

    def holdout_loss() -> float:
        total, count = 0.0, 0
        for i in range(0, px.shape[0], 16):
            sl = slice(i, i + 16)
            total += model.eval_loss(px[sl], pt[sl], peps[sl]) * px[sl].shape[0]
            count += px[sl].shape[0]
        return total / count

    initial = holdout_loss()
    history = {"initial_holdout": initial, "train_losses": [],
               "holdout_losses": [(model.train_step, initial)]}

    velocity = {name: np.zeros_like(p)
                for name, p in zip(model.parameter_names(), model.parameters())}
    names = model.parameter_names()
    params = model.parameters()

    for step in range(cfg.steps):
        idx = rng.integers(0, train_set.shape[0], cfg.batch)
        t = rng.uniform(T_LOW, T_HIGH, cfg.batch)
        eps = rng.standard_normal((cfg.batch,) + dataset.shape[1:]).astype(dtype)
        a = schedule.alpha(t).astype(dtype)[:, None, None, None]
        s = schedule.sigma(t).astype(dtype)[:, None, None, None]
        x_t = a * train_set[idx].astype(dtype) + s * eps

        loss, grads = model.loss_and_grads(x_t, t, eps)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(
                f"training loss became non-finite at step {model.train_step}",
                step=model.train_step)
        for name, p in zip(names, params):
            g = grads.get(name)
            if g is None:
                continue
            v = velocity[name]
            v *= cfg.momentum
            v += g
            p -= cfg.lr * v
        model.train_step += 1

        if (step + 1) % log_every == 0 or step + 1 == cfg.steps:
            hl = holdout_loss()
            history["train_losses"].append((model.train_step, loss))
            history["holdout_losses"].append((model.train_step, hl))
            if log_fn is not None:
                log_fn(model.train_step, loss, hl)

    history["final_holdout"] = holdout_loss() if cfg.steps else initial
    return model, history
