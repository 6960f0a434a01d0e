"""Grad-CAM saliency maps and heatmap overlays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ecovnet.errors import ArgumentError
from ecovnet.imaging import resize_bilinear
from ecovnet.model import ModelParams, backward, forward

DEFAULT_TARGET = "top"
OVERLAY_ALPHA = 0.4


@dataclass
class HeatMap:
    raw: np.ndarray          # ReLU'd map at feature resolution
    upsampled: np.ndarray    # normalized to [0, 1] at input resolution
    target_class: int
    snapshot: int | None = None


def cam_from_gradients(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU(sum_k w_k A^k) with w_k the spatial mean of dY/dA^k. Inputs are (K, H, W)."""
    weights = gradients.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, activations, axes=(0, 0)), 0.0)


def normalize(cam: np.ndarray) -> np.ndarray:
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def compute_cam(model: ModelParams, image: np.ndarray, target_class: int,
                target_layer: str = DEFAULT_TARGET, snapshot: int | None = None) -> HeatMap:
    """Grad-CAM for one (3, H, W) image, backpropagating the class probability."""
    C = model.arch.num_classes
    if not 0 <= target_class < C:
        raise ArgumentError(f"target class {target_class} outside [0, {C})")
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    res = forward(model, image[None].astype(model.dtype, copy=False), training=False)
    if target_layer not in res.activations:
        raise ArgumentError(f"no layer named {target_layer!r}; have {sorted(res.activations)}")
    A = res.activations[target_layer]
    if A.ndim != 4:
        raise ArgumentError(f"layer {target_layer!r} is not a 4-D activation")
    p = res.probs.astype(np.float64)
    # d p_c / d logits = p_c * (onehot_c - p)
    onehot = np.zeros_like(p)
    onehot[0, target_class] = 1.0
    dlogits = (p[0, target_class] * (onehot - p)).astype(model.dtype)
    dA = backward(model, res, dlogits, capture=target_layer)
    raw = cam_from_gradients(A[0].astype(np.float64), dA[0].astype(np.float64))
    H, W = image.shape[1:]
    up = normalize(np.maximum(resize_bilinear(raw, H, W), 0.0))
    return HeatMap(raw, up, target_class, snapshot)


def color_ramp(values: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) ramp; returns float RGB in [0, 255]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    blue = np.array([0.0, 0.0, 255.0])
    red = np.array([255.0, 0.0, 0.0])
    return (1.0 - v) * blue + v * red


def render_overlay(heatmap: HeatMap | np.ndarray, image: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the ramp colour over a grayscale image; per-pixel opacity is ``alpha * heat``.

    ``image`` is (H, W) or (3, H, W) with values in [0, 1]. Returns (H, W, 3) uint8.
    """
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray[0]
    H, W = gray.shape
    heat = heatmap.upsampled if isinstance(heatmap, HeatMap) else np.asarray(heatmap, dtype=np.float64)
    if heat.shape != (H, W):
        heat = resize_bilinear(heat, H, W)
    heat = np.clip(heat, 0.0, 1.0)
    base = np.repeat((np.clip(gray, 0.0, 1.0) * 255.0)[..., None], 3, axis=2)
    a = (alpha * heat)[..., None]
    out = (1.0 - a) * base + a * color_ramp(heat)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def quadrant_mass(heat: np.ndarray, quadrant: str = "upper-left") -> float:
    """Fraction of total heat inside one image quadrant (0 for an all-zero map)."""
    H, W = heat.shape
    rows = slice(0, H // 2) if quadrant.startswith("upper") else slice(H // 2, H)
    cols = slice(0, W // 2) if quadrant.endswith("left") else slice(W // 2, W)
    total = heat.sum()
    return float(heat[rows, cols].sum() / total) if total > 0 else 0.0
