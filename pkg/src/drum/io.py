"""Binary file formats and PNG export.

Range image (.drumimg): magic "DRUMIMG1", u32 H, u32 W, u32 C=2,
f32 max_range, f32 fov_up, f32 fov_down, then C*H*W float32 row-major in
metric units (drop sentinel -1).  Little-endian throughout.

Point cloud (.bin): KITTI-style headerless float32 quadruples (x, y, z,
reflectance).

Feature set (.drumfeat): magic "DRUMFEAT", u32 N, u32 D, then N*D float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .lidar import PointCloud, RangeImage, SensorIntrinsics, normalize

IMAGE_MAGIC = b"DRUMIMG1"
FEATURE_MAGIC = b"DRUMFEAT"
IMAGE_SUFFIX = ".drumimg"
FEATURE_SUFFIX = ".drumfeat"


def write_range_image(path, img: RangeImage) -> None:
    intr = img.intrinsics
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<IIIfff", intr.height, intr.width, 2,
                            intr.max_range, intr.fov_up, intr.fov_down))
        f.write(np.ascontiguousarray(img.range, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(img.reflectance, dtype="<f4").tobytes())


def read_range_image(path) -> RangeImage:
    with open(path, "rb") as f:
        if f.read(8) != IMAGE_MAGIC:
            raise InvalidArgumentError(f"{path}: not a range-image file")
        h, w, c, max_range, fov_up, fov_down = struct.unpack("<IIIfff", f.read(24))
        if c != 2:
            raise InvalidArgumentError(f"{path}: expected 2 channels, found {c}")
        raw = f.read(4 * c * h * w)
        if len(raw) != 4 * c * h * w:
            raise InvalidArgumentError(f"{path}: truncated payload")
        data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w)
    intr = SensorIntrinsics(height=h, width=w, fov_up=fov_up,
                            fov_down=fov_down, max_range=max_range)
    return RangeImage(data[0].copy(), data[1].copy(), intr)


def write_point_cloud(path, pc: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(pc.points, dtype="<f4").tobytes())


def read_point_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise InvalidArgumentError(f"{path}: size is not a multiple of 16 bytes")
    return PointCloud(np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy())


def write_feature_set(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InvalidArgumentError("feature set must be a (N, D) matrix")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", *features.shape))
        f.write(features.astype("<f4").tobytes())


def read_feature_set(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(8) != FEATURE_MAGIC:
            raise InvalidArgumentError(f"{path}: not a feature-set file")
        n, d = struct.unpack("<II", f.read(8))
        raw = f.read(4 * n * d)
        if len(raw) != 4 * n * d:
            raise InvalidArgumentError(f"{path}: truncated payload")
    return np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)


def export_png(img: RangeImage, out_dir, stem: str) -> list[Path]:
    """Write per-channel 8-bit grayscale PNGs via the normalization map;
    drops render black.  Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    norm = normalize(img)
    paths = []
    for ch, name in ((0, "range"), (1, "reflectance")):
        level = np.clip((norm[ch] + 1.0) * 0.5, 0.0, 1.0)
        level[img.drop_mask] = 0.0
        path = out_dir / f"{stem}_{name}.png"
        Image.fromarray((level * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)
        paths.append(path)
    return paths
