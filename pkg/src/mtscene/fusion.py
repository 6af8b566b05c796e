"""Center/offset grouping and semantic merge into a panoptic map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter


@dataclass
class FusionConfig:
    center_threshold: float = 0.1
    nms_kernel: int = 3
    top_k: int = 200
    min_area: int = 0
    thing_classes: FrozenSet[int] = frozenset({2, 3, 4, 5})
    void_id: int = 255

    def __post_init__(self):
        self.thing_classes = frozenset(int(c) for c in self.thing_classes)
        if not 0.0 < self.center_threshold < 1.0:
            raise ValueError("center_threshold must lie in (0, 1)")
        if self.nms_kernel < 1 or self.nms_kernel % 2 == 0:
            raise ValueError("nms_kernel must be a positive odd integer")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class PanopticMap:
    category: np.ndarray  # H x W semantic ids, void_id where unassigned
    instance: np.ndarray  # H x W instance ids, 0 for stuff / void
    orientations: Dict[int, Optional[float]] = field(default_factory=dict)  # None = undefined

    def check(self, thing_classes, void_id: int = 255) -> None:
        things = np.isin(self.category, list(thing_classes))
        if np.any((self.instance > 0) != things):
            raise AssertionError("instance ids must appear exactly on thing-class pixels")
        for i in np.unique(self.instance[self.instance > 0]):
            cats = np.unique(self.category[self.instance == i])
            if len(cats) != 1:
                raise AssertionError(f"instance {i} spans categories {cats.tolist()}")


def find_centers(heatmap: np.ndarray, cfg: FusionConfig) -> List[Tuple[int, int, float]]:
    """Local maxima under a max-filter, thresholded and capped at top_k.

    Sorted by descending score, ties in row-major order.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    pooled = maximum_filter(heat, size=cfg.nms_kernel, mode="constant", cval=-np.inf)
    keep = (heat == pooled) & (heat >= cfg.center_threshold)
    rows, cols = np.nonzero(keep)
    scores = heat[rows, cols]
    order = np.lexsort((cols, rows, -scores))[: cfg.top_k]
    return [(int(rows[i]), int(cols[i]), float(scores[i])) for i in order]


def group_pixels(centers: Sequence[Tuple], offsets: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    """Assign each foreground pixel to the nearest center of its regressed position.

    ``offsets`` is 2 x H x W (d_row, d_col). Returns ids 1..len(centers)
    in the order of ``centers``; ties go to the lower index.
    """
    foreground = np.asarray(foreground, dtype=bool)
    out = np.zeros(foreground.shape, dtype=np.int64)
    if len(centers) == 0 or not foreground.any():
        return out
    c = np.array([(r, q) for r, q, *_ in centers], dtype=np.float64)
    rows, cols = np.nonzero(foreground)
    pr = rows + offsets[0][rows, cols]
    pc = cols + offsets[1][rows, cols]
    d2 = (pr[:, None] - c[None, :, 0]) ** 2 + (pc[:, None] - c[None, :, 1]) ** 2
    out[rows, cols] = np.argmin(d2, axis=1) + 1  # argmin returns the first minimum
    return out


def merge_panoptic(semantic: np.ndarray, instance_grid: np.ndarray, cfg: FusionConfig) -> PanopticMap:
    """Combine a semantic argmax with grouped instances.

    Thing pixels take the majority semantic vote of their instance (ties to
    the smaller class id); instances under ``min_area`` and thing pixels left
    without an instance become void.
    """
    semantic = np.asarray(semantic)
    instance_grid = np.asarray(instance_grid)
    if semantic.shape != instance_grid.shape:
        raise ValueError("semantic and instance grids differ in extent")
    things = np.isin(semantic, list(cfg.thing_classes))
    category = semantic.astype(np.int64).copy()
    instance = np.zeros_like(instance_grid, dtype=np.int64)
    category[things] = cfg.void_id
    inst = np.where(things, instance_grid, 0)
    for i in np.unique(inst[inst > 0]):
        m = inst == i
        area = int(m.sum())
        if area < cfg.min_area:
            continue
        votes = np.bincount(semantic[m].astype(np.int64))
        category[m] = int(np.argmax(votes))
        instance[m] = int(i)
    return PanopticMap(category, instance)


def instance_orientation(orientation_map: np.ndarray, instance_grid: np.ndarray,
                         eps: float = 1e-9) -> Dict[int, Optional[float]]:
    """Per-instance angle in degrees [0, 360) from dense (cos, sin) votes.

    An instance whose mean vector vanishes maps to None.
    """
    out: Dict[int, Optional[float]] = {}
    for i in np.unique(instance_grid[instance_grid > 0]):
        m = instance_grid == i
        c = float(orientation_map[0][m].mean())
        s = float(orientation_map[1][m].mean())
        if np.hypot(c, s) < eps:
            out[int(i)] = None
            continue
        out[int(i)] = float(np.degrees(np.arctan2(s, c)) % 360.0)
    return out


def fuse(semantic_logits: np.ndarray, heatmap: np.ndarray, offsets: np.ndarray,
         orientation: np.ndarray, cfg: FusionConfig) -> PanopticMap:
    """Full post-processing for one image at a common resolution."""
    semantic = np.argmax(semantic_logits, axis=0)
    fg = np.isin(semantic, list(cfg.thing_classes))
    centers = find_centers(heatmap, cfg)
    grid = group_pixels(centers, offsets, fg)
    pan = merge_panoptic(semantic, grid, cfg)
    pan.orientations = instance_orientation(orientation, pan.instance)
    return pan
