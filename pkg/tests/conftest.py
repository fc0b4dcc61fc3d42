"""Shared fixtures: toy corpora, the trained toy prior, and the translated
set used by the end-to-end acceptance checks.

The heavyweight fixtures are session-scoped and lazy, so unit-test runs
that do not touch them stay fast.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from drum import (
    GuidanceConfig,
    ReflectanceZeroingOperator,
    SamplerConfig,
    TOY_INTRINSICS,
    ToySceneConfig,
    TrainConfig,
    gen_toy_scene,
    normalize,
    train_denoiser,
    translate_tensor,
)
from drum.cli import _sample_seed

N_SIM = 200
N_REAL = 260
TRAIN_STEPS = 2400

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_corpus():
    """Deterministic sim/real toy corpora sharing the sensor but not seeds."""
    rng = np.random.default_rng(20240901)
    seeds = rng.integers(0, 2**31 - 1, size=N_SIM + N_REAL)
    sim = [gen_toy_scene(ToySceneConfig(domain="sim", seed=int(s)), TOY_INTRINSICS)
           for s in seeds[:N_SIM]]
    real = [gen_toy_scene(ToySceneConfig(domain="real", seed=int(s)), TOY_INTRINSICS)
            for s in seeds[N_SIM:]]
    return {"sim": sim, "real": real}


@pytest.fixture(scope="session")
def trained_prior(toy_corpus):
    """The toy prior used by training-quality and end-to-end tests."""
    data = np.stack([normalize(img) for img in toy_corpus["real"]])
    cfg = TrainConfig(steps=TRAIN_STEPS, batch=8, lr=0.02, seed=7)
    start = time.perf_counter()
    model, history = train_denoiser(data, cfg)
    history["wall_seconds"] = time.perf_counter() - start
    return model, history


@pytest.fixture(scope="session")
def translated_set(toy_corpus, trained_prior):
    """All toy sim scans translated with the defaults, lock-step batched."""
    model, _ = trained_prior
    operator = ReflectanceZeroingOperator()
    cfg = SamplerConfig(seed=11, guidance=GuidanceConfig())
    sims = toy_corpus["sim"]
    outputs = []
    start = time.perf_counter()
    for lo in range(0, len(sims), 25):
        chunk = sims[lo:lo + 25]
        y_obs = np.stack([operator.apply(normalize(im)) for im in chunk])
        rngs = [_sample_seed(cfg.seed, f"sim_{lo + j:05d}") for j in range(len(chunk))]
        core = translate_tensor(y_obs, model, operator, cfg, rng=rngs,
                                on_failure="mark")
        assert not core.failed.any(), "translation produced non-finite samples"
        for j in range(len(chunk)):
            outputs.append({"x0": core.x0[j], "mask0": core.mask0[j],
                            "finalized": core.finalized[j]})
    return {"outputs": outputs, "wall_seconds": time.perf_counter() - start,
            "config": cfg}
