"""Random affine augmentation: horizontal flip, rotation, shear, zoom."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ecovnet.errors import ArgumentError


@dataclass(frozen=True)
class AugmentRanges:
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    shear_deg: tuple[float, float] = (-10.0, 10.0)
    zoom: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("rotation_deg", "shear_deg", "zoom"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ArgumentError(f"{name} range is inverted: ({lo}, {hi})")
        if self.zoom[0] <= 0:
            raise ArgumentError("zoom factors must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ArgumentError("flip_prob must be a probability")


@dataclass(frozen=True)
class AffineParams:
    flip: bool = False
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    zoom: float = 1.0

    def __post_init__(self):
        if self.zoom <= 0:
            raise ArgumentError("zoom must be positive")

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.rotation_deg == 0 and self.shear_deg == 0 and self.zoom == 1


def sample_affine(ranges: AugmentRanges, rng: np.random.Generator) -> AffineParams:
    # fixed draw order keeps the stream reproducible
    flip = bool(rng.random() < ranges.flip_prob)
    rot = float(rng.uniform(*ranges.rotation_deg))
    shear = float(rng.uniform(*ranges.shear_deg))
    zoom = float(rng.uniform(*ranges.zoom))
    return AffineParams(flip, rot, shear, zoom)


def affine_matrix(params: AffineParams) -> np.ndarray:
    """2x2 forward map on centred (row, col) coordinates: zoom @ shear @ rotate @ flip."""
    flip = np.array([[1.0, 0.0], [0.0, -1.0 if params.flip else 1.0]])
    t = math.radians(params.rotation_deg)
    # counter-clockwise as displayed (rows grow downward)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(params.shear_deg)), 1.0]])
    zoom = np.eye(2) * params.zoom
    return zoom @ shear @ rot @ flip


def bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional coordinates; neighbours outside the image read as 0."""
    H, W = image.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            r, c = r0 + dr, c0 + dc
            ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
            vals = np.where(ok, image[np.clip(r, 0, H - 1), np.clip(c, 0, W - 1)], 0.0)
            out += wr * wc * vals
    return out


def apply_affine(image: np.ndarray, params: AffineParams) -> np.ndarray:
    """Centre-anchored affine warp with bilinear interpolation and zero fill."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ArgumentError(f"expected a non-empty H x W image, got shape {image.shape}")
    if params.is_identity:
        return image.copy()
    H, W = image.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    inv = np.linalg.inv(affine_matrix(params))
    rr, cc = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    src_r = inv[0, 0] * rr + inv[0, 1] * cc + cy
    src_c = inv[1, 0] * rr + inv[1, 1] * cc + cx
    out = bilinear_sample(image.astype(np.float64), src_r, src_c)
    # bilinear weights can sum to 1 +/- 1 ulp; keep the output inside the input range
    lo, hi = min(float(image.min()), 0.0), float(image.max())
    return np.clip(out, lo, hi).astype(image.dtype, copy=False)
