"""Turn captured attention into image overlays.

From a captured forward pass: recompute the per-head score matrices, pull
the class-token row, min-max normalize, upsample to the image grid and
blend with a piecewise-linear hot colormap. All steps are pure functions,
so per-layer maps parallelize trivially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ppm import write_ppm
from .vit import AttentionRecord


@dataclass
class AttentionMap:
    """One layer's class-token attention on the patch grid, values in [0, 1]."""

    layer_index: int
    grid: np.ndarray  # [g, g]


@dataclass
class OverlayImage:
    width: int
    height: int
    rgb: np.ndarray  # [height, width, 3] uint8


def compute_attention_scores(record: AttentionRecord) -> np.ndarray:
    """Recompute softmax(Q K^T / sqrt(d_k)) per head for a single-image capture.

    Matches the forward-pass attention exactly in eval mode (same inputs,
    same stabilised softmax). Returns [heads, tokens, tokens].
    """
    q, k = record.query.data, record.key.data
    if q.shape != k.shape:
        raise ValueError(f"query shape {q.shape} differs from key shape {k.shape}")
    if q.ndim != 4 or q.shape[0] != 1:
        raise ValueError(f"expected a single-image capture [1, heads, T, d_k], got {q.shape}")
    d_k = q.shape[-1]
    logits = np.matmul(q[0], np.swapaxes(k[0], -1, -2)) / math.sqrt(d_k)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    scores = np.exp(shifted)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def class_token_map(scores: np.ndarray) -> np.ndarray:
    """Head-mean of the class-token attention row, reshaped to the patch grid.

    Row 0 is the class token; its weights over the N patch tokens (columns
    1..N) form the g x g map, g = sqrt(N).
    """
    mean_row = scores.mean(axis=0)[0, 1:]
    g = math.isqrt(mean_row.size)
    if g * g != mean_row.size:
        raise ValueError(f"{mean_row.size} patch tokens do not form a square grid")
    return mean_row.reshape(g, g)


def normalize_map(grid: np.ndarray, layer_index: int = 0) -> AttentionMap:
    """Min-max rescale to [0, 1]; a constant grid maps to all zeros."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo == 0.0:
        return AttentionMap(layer_index, np.zeros_like(grid, dtype=np.float64))
    return AttentionMap(layer_index, (grid - lo) / (hi - lo))


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners false)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bottom = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def hot_colormap(t: np.ndarray) -> np.ndarray:
    """Piecewise-linear black -> red -> yellow -> white map, float [0,1] channels."""
    t = np.asarray(t, dtype=np.float64)
    r = np.clip(3.0 * t, 0.0, 1.0)
    g = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * t - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(image: np.ndarray, resized_map: np.ndarray, alpha: float = 0.5) -> OverlayImage:
    """Blend (1-alpha) * image + alpha * hot(map), rounded half away from zero."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    image = np.asarray(image)
    if image.shape[:2] != resized_map.shape:
        raise ValueError(
            f"map shape {resized_map.shape} does not match image {image.shape[:2]}")
    cmap = hot_colormap(resized_map) * 255.0
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * cmap
    rgb = np.floor(blended + 0.5).astype(np.uint8)  # values are non-negative
    return OverlayImage(width=image.shape[1], height=image.shape[0], rgb=rgb)


def layer_overlays(image: np.ndarray, records, alpha: float = 0.5) -> list[OverlayImage]:
    """One overlay per captured encoder layer, in layer order."""
    out = []
    for record in records:
        scores = compute_attention_scores(record)
        amap = normalize_map(class_token_map(scores), record.layer_index)
        resized = resize_bilinear(amap.grid, image.shape[0], image.shape[1])
        out.append(render_overlay(image, resized, alpha))
    return out


def write_overlays(image: np.ndarray, records, out_dir, alpha: float = 0.5) -> list:
    """Render and save ``attn_layer_{i:02}.ppm`` per layer; returns the paths."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for record, overlay in zip(records, layer_overlays(image, records, alpha)):
        path = out_dir / f"attn_layer_{record.layer_index:02d}.ppm"
        write_ppm(path, overlay.rgb)
        paths.append(path)
    return paths
