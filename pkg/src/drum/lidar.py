"""LiDAR range-image data model: sensor geometry, the two-channel image
representation, log-range normalization and spherical projection to and
from point clouds.

Conventions:
  * range channel in meters, drop sentinel -1 (real returns are positive);
  * reflectance in [0, 1], 0 at drops;
  * normalized tensors live in [-1, 1]^2xHxW, drops at exactly -1;
  * azimuth wraps: column 0 sits at theta just below +pi, the theta=0 ray
    falls in column W/2; rows run from fov_up down to fov_down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

DROP_SENTINEL = -1.0

# Normalized range at or below this value is treated as a raydrop when
# mapping back to metric units.
DROP_THRESHOLD_NORM = -0.999


@dataclass(frozen=True)
class SensorIntrinsics:
    height: int
    width: int
    fov_up: float      # degrees, positive above horizon
    fov_down: float    # degrees
    max_range: float   # meters

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise InvalidArgumentError("image must be at least 4x4")
        if not self.fov_up > self.fov_down:
            raise InvalidArgumentError("fov_up must exceed fov_down")
        if self.max_range <= 0:
            raise InvalidArgumentError("max_range must be positive")


# Toy sensor: every beam points below the horizon so a bare ground plane
# fills the frame; 32x128 keeps desk-scale runtimes in minutes.
TOY_INTRINSICS = SensorIntrinsics(height=32, width=128, fov_up=-2.0,
                                  fov_down=-25.0, max_range=80.0)


@dataclass(frozen=True)
class RangeImage:
    """Two-channel equirectangular LiDAR sample in metric units."""

    range: np.ndarray        # (H, W) meters, DROP_SENTINEL at drops
    reflectance: np.ndarray  # (H, W) in [0, 1], 0 at drops
    intrinsics: SensorIntrinsics

    def __post_init__(self):
        r = np.asarray(self.range, dtype=np.float32)
        v = np.asarray(self.reflectance, dtype=np.float32)
        hw = (self.intrinsics.height, self.intrinsics.width)
        if r.shape != hw or v.shape != hw:
            raise InvalidArgumentError(
                f"channel shapes {r.shape}/{v.shape} do not match intrinsics {hw}")
        valid = r != DROP_SENTINEL
        if np.any((r[valid] <= 0) | (r[valid] > self.intrinsics.max_range)):
            raise InvalidArgumentError("ranges must lie in (0, max_range] or be the drop sentinel")
        if np.any((v < 0) | (v > 1)):
            raise InvalidArgumentError("reflectance must lie in [0, 1]")
        object.__setattr__(self, "range", r)
        object.__setattr__(self, "reflectance", v)

    @property
    def drop_mask(self) -> np.ndarray:
        """Boolean (H, W), True where the ray dropped."""
        return self.range == DROP_SENTINEL


@dataclass(frozen=True)
class PointCloud:
    """N x 4 array of (x, y, z, reflectance)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError("point cloud contains non-finite values")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


def normalize(img: RangeImage) -> np.ndarray:
    """Map a metric image to the (2, H, W) tensor in [-1, 1].

    Range uses a log map, x = 2 log(r+1)/log(max_range+1) - 1, which
    compresses the heavy-tailed range distribution; drops map to exactly -1.
    Reflectance maps linearly, x = 2 v - 1.
    """
    scale = np.log1p(img.intrinsics.max_range)
    rng_n = np.where(img.drop_mask, np.float32(-1.0),
                     (2.0 * np.log1p(np.maximum(img.range, 0.0)) / scale - 1.0
                      ).astype(np.float32))
    ref_n = (2.0 * img.reflectance - 1.0).astype(np.float32)
    return np.stack([rng_n, ref_n]).astype(np.float32)


def denormalize(tensor: np.ndarray, intrinsics: SensorIntrinsics,
                drop_threshold: float = DROP_THRESHOLD_NORM) -> RangeImage:
    """Exact inverse of :func:`normalize` on non-drop pixels.

    Normalized range at or below ``drop_threshold`` becomes the drop
    sentinel; reflectance is clamped back into [0, 1] and zeroed at drops.
    """
    tensor = np.asarray(tensor)
    if tensor.ndim != 3 or tensor.shape[0] != 2:
        raise InvalidArgumentError(f"expected a (2, H, W) tensor, got {tensor.shape}")
    scale = np.log1p(intrinsics.max_range)
    rng_n, ref_n = tensor[0].astype(np.float64), tensor[1]
    drops = rng_n <= drop_threshold
    r = np.expm1(np.clip((rng_n + 1.0) * 0.5, 0.0, 1.0) * scale)
    r = np.clip(r, np.finfo(np.float32).tiny, intrinsics.max_range)
    r = np.where(drops, DROP_SENTINEL, r).astype(np.float32)
    v = np.clip((ref_n + 1.0) * 0.5, 0.0, 1.0)
    v = np.where(drops, 0.0, v).astype(np.float32)
    return RangeImage(r, v, intrinsics)


def pixel_angles(intrinsics: SensorIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center angles: azimuth theta (W,) and elevation phi (H,), radians."""
    h, w = intrinsics.height, intrinsics.width
    theta = np.pi - 2.0 * np.pi * (np.arange(w) + 0.5) / w
    fu, fd = np.deg2rad(intrinsics.fov_up), np.deg2rad(intrinsics.fov_down)
    phi = fu - (np.arange(h) + 0.5) * (fu - fd) / h
    return theta, phi


def ray_directions(intrinsics: SensorIntrinsics) -> np.ndarray:
    """(H, W, 3) unit direction per pixel center."""
    theta, phi = pixel_angles(intrinsics)
    h, w = intrinsics.height, intrinsics.width
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    dx = cp[:, None] * ct[None, :]
    dy = cp[:, None] * st[None, :]
    dz = np.broadcast_to(sp[:, None], (h, w))
    return np.stack([dx, dy, dz], axis=-1)


def project(pc: PointCloud, intrinsics: SensorIntrinsics) -> RangeImage:
    """Spherical projection of a point cloud; nearest point wins a pixel.

    u = floor(W (1 - (theta+pi)/2pi)) mod W, v = floor(H (fov_up - phi)/fov)
    clamped to [0, H-1]; points outside (0, max_range] are discarded and
    unhit pixels get the drop sentinel.
    """
    if len(pc) == 0:
        raise InvalidArgumentError("cannot project an empty point cloud")
    h, w = intrinsics.height, intrinsics.width
    xyz = pc.points[:, :3].astype(np.float64)
    refl = pc.points[:, 3]
    r = np.linalg.norm(xyz, axis=1)
    keep = (r > 0) & (r <= intrinsics.max_range)
    xyz, refl, r = xyz[keep], refl[keep], r[keep]

    rng_img = np.full((h, w), DROP_SENTINEL, dtype=np.float32)
    ref_img = np.zeros((h, w), dtype=np.float32)
    if r.size:
        theta = np.arctan2(xyz[:, 1], xyz[:, 0])
        phi = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))
        u = np.floor(w * (1.0 - (theta + np.pi) / (2.0 * np.pi))).astype(np.int64) % w
        fu, fd = np.deg2rad(intrinsics.fov_up), np.deg2rad(intrinsics.fov_down)
        v = np.floor(h * (fu - phi) / (fu - fd)).astype(np.int64)
        v = np.clip(v, 0, h - 1)
        order = np.argsort(r)[::-1]  # write far first, near overwrites
        rng_img[v[order], u[order]] = r[order].astype(np.float32)
        ref_img[v[order], u[order]] = refl[order]
    ref_img[rng_img == DROP_SENTINEL] = 0.0
    return RangeImage(rng_img, np.clip(ref_img, 0.0, 1.0), intrinsics)


def unproject(img: RangeImage, intrinsics: SensorIntrinsics | None = None) -> PointCloud:
    """One point per non-drop pixel, placed at the pixel-center angles."""
    intr = intrinsics if intrinsics is not None else img.intrinsics
    theta, phi = pixel_angles(intr)
    hit = ~img.drop_mask
    vv, uu = np.nonzero(hit)
    r = img.range[vv, uu].astype(np.float64)
    th, ph = theta[uu], phi[vv]
    pts = np.stack([
        r * np.cos(ph) * np.cos(th),
        r * np.cos(ph) * np.sin(th),
        r * np.sin(ph),
        img.reflectance[vv, uu].astype(np.float64),
    ], axis=1)
    return PointCloud(pts.astype(np.float32))
