"""Procedural toy LiDAR scenes: a ground plane plus axis-aligned boxes,
raycast through the sensor grid.

The same seed produces the same geometry in both domains; the domains
differ only in rendering.  Simulation renders exact ranges with a zeroed
reflectance channel and no drops.  The real domain shades reflectance with
a Lambertian-times-falloff model and applies Bernoulli raydrop, with an
elevated drop probability on glass boxes and at grazing incidence (the two
situations where a real sensor loses returns most often).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .lidar import DROP_SENTINEL, RangeImage, SensorIntrinsics, TOY_INTRINSICS, ray_directions

SENSOR_HEIGHT = 1.7      # meters above the ground plane
GRAZING_COS = 0.25       # incidence cosine below which returns get flaky
GLASS_FRACTION = 0.35
FALLOFF_RANGE = 30.0     # meters at which the 1/(1+(r/R)^2) falloff halves


@dataclass(frozen=True)
class ToySceneConfig:
    domain: str = "real"
    n_boxes: int = 6
    drop_base: float = 0.08
    drop_glass: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.domain not in ("sim", "real"):
            raise InvalidArgumentError(f"domain must be 'sim' or 'real', got {self.domain!r}")
        if self.n_boxes < 0:
            raise InvalidArgumentError("n_boxes must be non-negative")
        for p in (self.drop_base, self.drop_glass):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgumentError("drop probabilities must lie in [0, 1]")


def _intersect_ground(dirs: np.ndarray):
    """Ray-plane hit distances against z = -SENSOR_HEIGHT (inf if missed)."""
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < -1e-9, -SENSOR_HEIGHT / dz, np.inf)
    return t


def _intersect_box(dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test for one AABB. Returns (t_enter, hit_axis)."""
    t_near = np.full(dirs.shape[:2], -np.inf)
    t_far = np.full(dirs.shape[:2], np.inf)
    axis = np.zeros(dirs.shape[:2], dtype=np.int8)
    for k in range(3):
        d = dirs[..., k]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(d) > 1e-12, 1.0 / d, np.inf)
            t1 = np.nan_to_num(lo[k] * inv, nan=-np.inf)
            t2 = np.nan_to_num(hi[k] * inv, nan=np.inf)
        tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
        enter_here = tmin > t_near
        axis = np.where(enter_here, k, axis)
        t_near = np.maximum(t_near, tmin)
        t_far = np.minimum(t_far, tmax)
        parallel_outside = (np.abs(d) <= 1e-12) & ((0.0 < lo[k]) | (0.0 > hi[k]))
        t_far = np.where(parallel_outside, -np.inf, t_far)
    hit = (t_near <= t_far) & (t_near > 0.05)
    return np.where(hit, t_near, np.inf), axis


def gen_toy_scene(cfg: ToySceneConfig,
                  intrinsics: SensorIntrinsics = TOY_INTRINSICS) -> RangeImage:
    """Raycast one scene into a RangeImage for the configured domain."""
    rng = np.random.default_rng(cfg.seed)
    dirs = ray_directions(intrinsics)
    h, w = intrinsics.height, intrinsics.width

    # Scene layout (drawn before any domain-specific randomness so sim and
    # real renderings of one seed share geometry).
    best_t = _intersect_ground(dirs)
    # hit attributes: albedo, normal axis (2=z for ground), glass flag
    albedo = np.full((h, w), 0.35)
    glass = np.zeros((h, w), dtype=bool)
    normal_axis = np.full((h, w), 2, dtype=np.int8)

    for _ in range(cfg.n_boxes):
        ang = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(5.0, 35.0)
        cx, cy = dist * np.cos(ang), dist * np.sin(ang)
        sx, sy = rng.uniform(0.5, 3.0, 2)
        sz = rng.uniform(0.8, 3.2)
        box_albedo = rng.uniform(0.2, 0.9)
        is_glass = rng.uniform() < GLASS_FRACTION
        lo = np.array([cx - sx, cy - sy, -SENSOR_HEIGHT])
        hi = np.array([cx + sx, cy + sy, -SENSOR_HEIGHT + sz])
        t_box, axis = _intersect_box(dirs, lo, hi)
        closer = t_box < best_t
        best_t = np.where(closer, t_box, best_t)
        albedo = np.where(closer, box_albedo, albedo)
        glass = np.where(closer, is_glass, glass)
        normal_axis = np.where(closer, axis, normal_axis)

    hit = np.isfinite(best_t) & (best_t <= intrinsics.max_range)
    rng_img = np.where(hit, best_t, DROP_SENTINEL).astype(np.float32)

    if cfg.domain == "sim":
        return RangeImage(rng_img, np.zeros((h, w), dtype=np.float32), intrinsics)

    # Real domain: Lambertian shading with distance falloff, then raydrop.
    cos_inc = np.abs(np.take_along_axis(
        dirs, normal_axis[..., None].astype(np.int64), axis=2))[..., 0]
    falloff = 1.0 / (1.0 + (np.where(hit, best_t, 0.0) / FALLOFF_RANGE) ** 2)
    refl = np.clip(albedo * cos_inc * falloff, 0.0, 1.0)
    refl = np.where(glass, refl * 0.35, refl)

    p_drop = np.full((h, w), cfg.drop_base)
    p_drop = np.where(glass | (cos_inc < GRAZING_COS),
                      np.maximum(p_drop, cfg.drop_glass), p_drop)
    drops = rng.uniform(size=(h, w)) < p_drop
    dropped = drops | ~hit
    rng_img = np.where(dropped, DROP_SENTINEL, rng_img).astype(np.float32)
    refl = np.where(dropped, 0.0, refl).astype(np.float32)
    return RangeImage(rng_img, refl, intrinsics)
