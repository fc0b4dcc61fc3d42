"""Distributional fidelity metrics: Gaussian feature summaries, the
Frechet distance between them, raydrop statistics, and a lightweight
built-in feature extractor.

The built-in features (64-D: a 32-bin log-range histogram, a 16-bin
reflectance histogram and an 8-block mean grid over both normalized
channels) exist so that relative rankings can be computed at desk scale;
they are deliberately simple and NOT comparable to metrics built on
pretrained deep feature extractors.  Externally computed feature sets can
be loaded through :mod:`drum.io` and fed to the same Gaussian machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from .errors import InsufficientDataError, InvalidArgumentError, NumericFailureError
from .lidar import RangeImage, normalize

FEATURE_DIM = 64
_RANGE_BINS = 32
_REFL_BINS = 16
_BLOCK_GRID = (2, 4)  # 8 blocks per channel

# Covariance regularization: standard FID practice, keeps near-singular
# covariances from producing spurious negative eigenvalues in the sqrt.
_EIG_FLOOR = 1e-10
_REG_EPS = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise InvalidArgumentError(
                f"inconsistent stats shapes {mean.shape} / {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise InvalidArgumentError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased sample covariance of an (N, D) feature set."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InvalidArgumentError("feature set must be a (N, D) matrix")
    if features.shape[0] < 2:
        raise InsufficientDataError(
            f"need at least 2 feature vectors, got {features.shape[0]}")
    if not np.all(np.isfinite(features)):
        raise InvalidArgumentError("feature set contains non-finite entries")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (features.shape[0] - 1)
    return GaussianStats(mean, cov)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The matrix square root is taken through the symmetric eigendecomposition
    of S_a^{1/2} S_b S_a^{1/2}; negative eigenvalues from roundoff are
    clamped to zero, and nearly-singular inputs are regularized with a small
    diagonal ridge on both sides.
    """
    if a.dim != b.dim:
        raise InvalidArgumentError(f"dimension mismatch: {a.dim} vs {b.dim}")
    cov_a, cov_b = a.cov, b.cov
    min_eig = min(eigh(cov_a, eigvals_only=True)[0],
                  eigh(cov_b, eigvals_only=True)[0])
    if min_eig < _EIG_FLOOR:
        ridge = _REG_EPS * np.eye(a.dim)
        cov_a = cov_a + ridge
        cov_b = cov_b + ridge
    try:
        root_a = _psd_sqrt(cov_a)
        inner = root_a @ cov_b @ root_a
        cross = np.clip(eigh((inner + inner.T) / 2.0, eigvals_only=True), 0.0, None)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"eigendecomposition failed: {exc}") from exc
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
               - 2.0 * np.sum(np.sqrt(cross)))
    return max(fd, 0.0)


def raydrop_ratio(img: RangeImage) -> float:
    """Fraction of raydrop (sentinel) pixels."""
    return float(img.drop_mask.mean())


def builtin_features(img: RangeImage) -> np.ndarray:
    """Deterministic 64-D summary of one range image.

    Layout: [0:32] histogram of normalized range over (-1, 1], drops
    excluded, as fractions of all pixels; [32:48] histogram of reflectance
    over [0, 1] at valid pixels, same normalization; [48:64] means of the
    two normalized channels over a 2x4 block grid (channel 0 blocks first,
    row-major).
    """
    norm = normalize(img)
    total = img.range.size
    valid = ~img.drop_mask

    rhist, _ = np.histogram(norm[0][valid], bins=_RANGE_BINS, range=(-1.0, 1.0))
    vhist, _ = np.histogram(img.reflectance[valid], bins=_REFL_BINS, range=(0.0, 1.0))

    gh, gw = _BLOCK_GRID
    h, w = img.range.shape
    if h % gh or w % gw:
        raise InvalidArgumentError(f"image {h}x{w} not divisible by block grid {gh}x{gw}")
    blocks = norm.reshape(2, gh, h // gh, gw, w // gw).mean(axis=(2, 4)).reshape(2, -1)

    return np.concatenate([rhist / total, vhist / total,
                           blocks[0], blocks[1]]).astype(np.float64)


def feature_matrix(images) -> np.ndarray:
    """Stack built-in features for an iterable of images into (N, 64)."""
    return np.stack([builtin_features(img) for img in images])
