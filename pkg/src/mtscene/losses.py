"""Scene head, the five task losses, and the target encoders they consume."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence

import numpy as np

from . import functional as F
from . import nn
from .tensor import Tensor, exp, maximum, sqrt, square, tabs, tsum

TASKS = ("se", "ce", "of", "or", "sc")


@dataclass
class LossConfig:
    kappa: float = 1.0
    center_sigma: float = 8.0
    ignore_id: int = 255

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.center_sigma <= 0:
            raise ValueError("center_sigma must be positive")


@dataclass
class LossBatch:
    l_se: Tensor
    l_ce: Tensor
    l_of: Tensor
    l_or: Tensor
    l_sc: Tensor

    def as_list(self) -> List[Tensor]:
        return [self.l_se, self.l_ce, self.l_of, self.l_or, self.l_sc]

    def values(self) -> List[float]:
        return [float(t.data) for t in self.as_list()]


@dataclass
class CenterTargets:
    heatmap: np.ndarray     # h x w in [0, 1]
    offsets: np.ndarray     # 2 x h x w, (d_row, d_col) in level pixels
    valid_mask: np.ndarray  # h x w bool, thing pixels
    centroids: dict         # instance id -> (row, col) in level pixels


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def semantic_loss(logits: Tensor, labels: np.ndarray, ignore_id: int = 255) -> Tensor:
    """Mean pixel cross-entropy over non-ignored pixels."""
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    k = logits.shape[1]
    valid = labels != ignore_id
    if np.any(valid & ((labels < 0) | (labels >= k))):
        raise ValueError(f"labels must lie in [0, {k}) or equal ignore_id")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("semantic_loss: every pixel is ignored")
    target = F.one_hot(np.where(valid, labels, -1), k, axis=1, dtype=logits.dtype)
    logp = F.log_softmax(logits, axis=1)
    return -tsum(logp * target) * (1.0 / n_valid)


def center_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"center_loss: shape {pred.shape} vs {target.shape}")
    return tsum(square(pred - target.astype(pred.dtype))) * (1.0 / pred.size)


def offset_loss(pred: Tensor, target: np.ndarray, valid_mask: np.ndarray) -> Tensor:
    """Mean absolute error over masked cells and both offset channels.

    ``pred`` and ``target`` are N x 2 x h x w, ``valid_mask`` N x h x w.
    """
    mask = np.asarray(valid_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("offset_loss: empty valid mask")
    m = np.broadcast_to(mask[:, None], pred.shape).astype(pred.dtype)
    return tsum(tabs(pred - np.asarray(target, dtype=pred.dtype)) * m) * (1.0 / (2 * n))


def orientation_loss(f: Tensor, t: np.ndarray, kappa: float = 1.0, mask: Optional[np.ndarray] = None,
                     norm_floor: float = 1e-6) -> Tensor:
    """von Mises style loss 1 - exp(kappa * (f.t - 1)).

    ``f`` holds raw (cos, sin) predictions along axis 1; they are normalized
    to unit length first. ``t`` holds unit targets of the same shape. With a
    mask (shape of ``f`` minus axis 1) only masked positions are averaged.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    t = np.asarray(t, dtype=f.dtype)
    if t.shape != f.shape:
        raise ValueError(f"orientation_loss: shape {f.shape} vs {t.shape}")
    norm = sqrt(tsum(square(f), axis=1, keepdims=True))
    if mask is None:
        if np.any(norm.data < norm_floor):
            raise ValueError("orientation_loss: zero-norm prediction")
        weights = np.ones(norm.shape[:1] + norm.shape[2:], dtype=f.dtype)
    else:
        weights = np.asarray(mask, dtype=f.dtype)
    n = float(weights.sum())
    if n == 0:
        raise ValueError("orientation_loss: empty mask")
    unit = f / maximum(norm, norm_floor)
    dot = tsum(unit * t, axis=1)
    per = 1.0 - exp((dot - 1.0) * kappa)
    return tsum(per * weights) * (1.0 / n)


def scene_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("scene_loss: empty batch")
    n, c = logits.shape
    if labels.shape != (n,) or np.any((labels < 0) | (labels >= c)):
        raise ValueError(f"scene labels must be {n} ids in [0, {c})")
    logp = F.log_softmax(logits, axis=1)
    return -tsum(logp * F.one_hot(labels, c, axis=1, dtype=logits.dtype)) * (1.0 / n)


# ---------------------------------------------------------------------------
# scene head
# ---------------------------------------------------------------------------


def init_scene_head(init: nn.Initializer, cin: int, num_classes: int, prefix: str = "scene") -> None:
    init.linear(f"{prefix}.fc", cin, num_classes)


def scene_head(stage4: Tensor, params: nn.Params, prefix: str = "scene") -> Tensor:
    return F.linear(F.global_avg_pool(stage4), params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def downsample_ids(grid: np.ndarray, scale: int) -> np.ndarray:
    """Nearest-neighbour downsampling of a label grid by an integer factor."""
    if scale == 1:
        return np.asarray(grid)
    h, w = grid.shape
    if h // scale < 1 or w // scale < 1:
        raise ValueError(f"level scale {scale} leaves no cells for a {h}x{w} grid")
    return np.asarray(grid)[scale // 2 :: scale, scale // 2 :: scale][: h // scale, : w // scale]


def instance_centroids(instance_map: np.ndarray) -> dict:
    """Mass centroid (row, col) of every positive id."""
    ids = np.unique(instance_map)
    rows, cols = np.indices(instance_map.shape)
    out = {}
    for i in ids[ids > 0]:
        m = instance_map == i
        out[int(i)] = (float(rows[m].mean()), float(cols[m].mean()))
    return out


def to_level(coord: float, scale: int) -> float:
    """Map a full-resolution coordinate to a level grid with half-pixel centers."""
    return (coord - (scale - 1) / 2.0) / scale


def encode_center_targets(instance_map: np.ndarray, level_scale: int = 1, sigma: float = 8.0) -> CenterTargets:
    """Heatmap, offsets and mask for one image at one pyramid level.

    Centroids are computed on the full-resolution ``instance_map`` and mapped
    to level coordinates; thing membership at the level comes from the
    nearest-neighbour downsampled map. The heatmap is the max over instances
    of a Gaussian (std ``sigma / level_scale``) centred on the rounded
    centroid cell, so each centroid cell holds exactly 1.0.
    """
    instance_map = np.asarray(instance_map)
    level = downsample_ids(instance_map, level_scale)
    h, w = level.shape
    s = sigma / level_scale
    rows, cols = np.indices((h, w), dtype=np.float64)
    heat = np.zeros((h, w))
    offsets = np.zeros((2, h, w))
    valid = level > 0
    cents = {}
    for i, (r, c) in instance_centroids(instance_map).items():
        r, c = to_level(r, level_scale), to_level(c, level_scale)
        cents[i] = (r, c)
        pr = min(max(int(np.floor(r + 0.5)), 0), h - 1)
        pc = min(max(int(np.floor(c + 0.5)), 0), w - 1)
        heat = np.maximum(heat, np.exp(-((rows - pr) ** 2 + (cols - pc) ** 2) / (2 * s * s)))
        m = level == i
        offsets[0][m] = r - rows[m]
        offsets[1][m] = c - cols[m]
    return CenterTargets(heat, offsets, valid, cents)


def pyramid_targets(instance_map: np.ndarray, scales: Sequence[int], sigma: float = 8.0) -> List[CenterTargets]:
    return [encode_center_targets(instance_map, s, sigma) for s in scales]


def encode_orientation_targets(instance_map: np.ndarray, orientations: Mapping[int, float],
                               level_scale: int = 1):
    """Dense unit (cos, sin) targets and a mask of labelled instance cells."""
    level = downsample_ids(np.asarray(instance_map), level_scale)
    target = np.zeros((2,) + level.shape)
    mask = np.zeros(level.shape, dtype=bool)
    for i, deg in orientations.items():
        m = level == int(i)
        rad = np.deg2rad(deg)
        target[0][m] = np.cos(rad)
        target[1][m] = np.sin(rad)
        mask |= m
    return target, mask
