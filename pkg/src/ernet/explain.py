"""Grad-CAM heat maps over the final conv feature map, plus overlay rendering.

The CAM target layer is the last trunk feature map (block 7 output, before
global average pooling). Channel weights are the spatial mean of the target
logit's gradient at that map; the heatmap is the rectified weighted channel
sum, max-normalized with a zero-map guard, then upsampled bilinearly to the
input size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import resize_bilinear, write_ppm
from .errors import ArgumentError, ShapeError


@dataclass
class CamResult:
    heatmap: np.ndarray          # (h_f, w_f) in [0,1]
    upsampled: np.ndarray        # (h, w) in [0,1]
    target_class: int
    predicted_class: int
    channel_weights: np.ndarray  # (channels,) gradient means


def grad_cam(graph: models.ModelGraph, x: np.ndarray, target=None) -> CamResult:
    """Heat map of the spatial evidence for `target` (default: the prediction)."""
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"grad_cam takes a single image, got shape {x.shape}")
    logits, cache = models.forward(graph, x)
    predicted = int(logits[0].argmax())
    if target is None:
        target = predicted
    target = int(target)
    if not 0 <= target < graph.class_count:
        raise ArgumentError(f"target class {target} out of range for {graph.class_count} classes")
    d_logits = np.zeros_like(logits)
    d_logits[0, target] = 1.0
    d_feature = models.feature_gradient(graph, cache, d_logits)
    weights = d_feature[0].mean(axis=(0, 1))
    cam = np.maximum(np.tensordot(cache.feature_map[0], weights, axes=([2], [0])), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    h, w = graph.input_shape[:2]
    upsampled = np.clip(resize_bilinear(cam, h, w), 0.0, 1.0)
    return CamResult(
        heatmap=cam,
        upsampled=upsampled,
        target_class=target,
        predicted_class=predicted,
        channel_weights=weights,
    )


def render_overlay(image: np.ndarray, cam: CamResult, alpha: float) -> np.ndarray:
    """Alpha-blend the upsampled heatmap, colored blue (cold) to red (hot)."""
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0,1], got {alpha}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"render_overlay expects an (h,w,3) image, got {image.shape}")
    heat = cam.upsampled
    if image.shape[:2] != heat.shape:
        raise ShapeError(
            f"image extent {image.shape[:2]} does not match heatmap extent {heat.shape}"
        )
    image = image.astype(np.float32, copy=False)
    t = heat.astype(np.float32)
    ramp = np.stack([t, np.zeros_like(t), 1.0 - t], axis=-1)
    out = (1.0 - alpha) * image + np.float32(alpha) * ramp
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def save_overlay(path, overlay: np.ndarray) -> None:
    write_ppm(path, overlay)
