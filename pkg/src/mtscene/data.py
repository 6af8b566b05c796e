"""Deterministic toy RGB-D scenes and their on-disk dataset layout."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .io import FormatError, PathLike, atomic_write_text, read_tensor, write_tensor

MIN_AREA_FRACTION = 0.0025

STUFF_NAMES = ("wall", "floor", "ceiling", "window")
THING_SHAPES = ("box", "ellipse", "rotated_box", "diamond")

# wall / floor palettes per scene class
SCENE_PALETTES = (
    ((0.85, 0.80, 0.70), (0.45, 0.30, 0.20)),
    ((0.55, 0.65, 0.80), (0.30, 0.30, 0.35)),
    ((0.70, 0.85, 0.65), (0.60, 0.50, 0.35)),
    ((0.90, 0.70, 0.75), (0.20, 0.25, 0.20)),
    ((0.60, 0.60, 0.60), (0.50, 0.40, 0.50)),
    ((0.95, 0.90, 0.50), (0.35, 0.20, 0.30)),
)
THING_COLOURS = (
    (0.90, 0.20, 0.15),
    (0.15, 0.55, 0.90),
    (0.20, 0.80, 0.25),
    (0.95, 0.75, 0.10),
    (0.60, 0.20, 0.80),
    (0.10, 0.80, 0.80),
)


class DataError(ValueError):
    """Invalid dataset content or generator configuration."""


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    num_stuff: int = 2
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 10
    max_size: int = 18
    min_center_distance: float = 16.0
    depth_noise: bool = False

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise DataError("scene extents must be >= 8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DataError("need 1 <= min_objects <= max_objects")
        if self.num_stuff < 1:
            raise DataError("need at least one stuff class")
        if not 2 <= self.min_size <= self.max_size:
            raise DataError("need 2 <= min_size <= max_size")


@dataclass
class SceneSample:
    rgb: np.ndarray        # 3 x H x W in [0, 1]
    depth: np.ndarray      # 1 x H x W in [0, 1]
    semantic: np.ndarray   # H x W class ids
    instance: np.ndarray   # H x W ids, 0 = stuff
    orientations: Dict[int, float]
    scene_class: int

    def validate(self, thing_classes, min_area_fraction: float = MIN_AREA_FRACTION) -> None:
        h, w = self.semantic.shape
        if self.rgb.shape != (3, h, w) or self.depth.shape != (1, h, w) or self.instance.shape != (h, w):
            raise DataError("sample grids have inconsistent extents")
        things = np.isin(self.semantic, list(thing_classes))
        if np.any((self.instance > 0) != things):
            raise DataError("thing pixels and instance pixels disagree")
        min_area = min_area_fraction * h * w
        for i in np.unique(self.instance[self.instance > 0]).tolist():
            if i not in self.orientations:
                raise DataError(f"instance {i} missing from orientation table")
            if (self.instance == i).sum() < min_area:
                raise DataError(f"instance {i} covers less than {min_area_fraction:.2%} of the image")

    def rgbd(self) -> np.ndarray:
        return np.concatenate([self.rgb, self.depth], axis=0)


def semantic_class_count(cfg: DataConfig, num_things: int) -> int:
    return cfg.num_stuff + num_things


def _shape_mask(kind: str, rows, cols, cr, cc, a, b, phi):
    dr, dc = rows - cr, cols - cc
    if kind in ("rotated_box", "diamond"):
        cos, sin = np.cos(phi), np.sin(phi)
        u = dc * cos + dr * sin
        v = -dc * sin + dr * cos
    else:
        u, v = dc, dr
    if kind in ("box", "rotated_box"):
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return np.abs(u) / a + np.abs(v) / b <= 1.0


def generate_scene(seed: int, cfg: DataConfig, num_things: int = 4, num_scenes: int = 4,
                   max_attempts: int = 200) -> SceneSample:
    """Render one labelled scene; fully determined by ``seed``."""
    h, w = cfg.height, cfg.width
    min_area = int(np.ceil(MIN_AREA_FRACTION * h * w))
    if cfg.max_objects * min_area > h * w:
        raise DataError(f"{cfg.max_objects} objects of >= {min_area} px cannot fit a {h}x{w} image")
    if np.pi * cfg.max_size * cfg.max_size / 4 > h * w:
        raise DataError("object size exceeds the image")
    rng = np.random.default_rng(seed)
    rows, cols = np.indices((h, w), dtype=np.float64)
    scene = int(rng.integers(num_scenes))
    wall_c, floor_c = SCENE_PALETTES[scene % len(SCENE_PALETTES)]
    shade = 1.0 + 0.15 * (scene // len(SCENE_PALETTES))

    # stuff: horizontal bands, first band wall-like, the rest floor-like
    horizon = int(rng.integers(int(0.35 * h), int(0.6 * h) + 1))
    semantic = np.zeros((h, w), dtype=np.int64)
    bounds = np.linspace(horizon, h, cfg.num_stuff - 1, endpoint=False).astype(int) if cfg.num_stuff > 1 else []
    for k, b in enumerate(bounds, start=1):
        semantic[int(b):, :] = k
    rgb = np.empty((3, h, w))
    for k in range(cfg.num_stuff):
        m = semantic == k
        base = np.asarray(wall_c if k == 0 else floor_c) * (1.0 - 0.1 * max(k - 1, 0))
        for ch in range(3):
            rgb[ch][m] = np.clip(base[ch] * shade, 0, 1)
    # distance field: far wall, floor approaching the camera towards the bottom
    dist = np.where(rows < horizon, 6.0, 6.0 - 5.0 * (rows - horizon) / max(h - horizon, 1))
    rgb *= (0.9 + 0.1 * (1.0 - rows / h))[None]

    instance = np.zeros((h, w), dtype=np.int64)
    orientations: Dict[int, float] = {}
    for attempt in range(max_attempts):
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objs = []
        for _ in range(n_obj):
            cls = int(rng.integers(num_things))
            a = float(rng.uniform(cfg.min_size, cfg.max_size)) / 2 + 1
            b = float(rng.uniform(cfg.min_size, cfg.max_size)) / 2 + 1
            cr = float(rng.uniform(b, h - 1 - b))
            cc = float(rng.uniform(a, w - 1 - a))
            phi_deg = float(rng.uniform(0.0, 360.0))
            d = float(rng.uniform(1.0, 4.0))
            objs.append((cls, cr, cc, a, b, phi_deg, d))
        # paint far to near
        objs.sort(key=lambda o: -o[6])
        inst = np.zeros((h, w), dtype=np.int64)
        for idx, (cls, cr, cc, a, b, phi_deg, d) in enumerate(objs, start=1):
            kind = THING_SHAPES[cls % len(THING_SHAPES)]
            m = _shape_mask(kind, rows, cols, cr, cc, a, b, np.deg2rad(phi_deg))
            inst[m] = idx
        ids = list(range(1, len(objs) + 1))
        areas = [(inst == i).sum() for i in ids]
        if min(areas) < min_area:
            continue
        cents = [(rows[inst == i].mean(), cols[inst == i].mean()) for i in ids]
        if any(
            np.hypot(p[0] - q[0], p[1] - q[1]) < cfg.min_center_distance
            for k, p in enumerate(cents) for q in cents[k + 1 :]
        ):
            continue
        break
    else:
        raise DataError(f"seed {seed}: could not place objects after {max_attempts} attempts")

    for idx, (cls, cr, cc, a, b, phi_deg, d) in enumerate(objs, start=1):
        m = inst == idx
        phi = np.deg2rad(phi_deg)
        # brightness ramps along the orientation so the heading is visible
        along = ((cols - cc) * np.cos(phi) + (rows - cr) * np.sin(phi)) / max(a, b)
        ramp = 0.55 + 0.45 * np.clip(along, -1.0, 1.0)
        colour = np.asarray(THING_COLOURS[cls % len(THING_COLOURS)])
        for ch in range(3):
            rgb[ch][m] = np.clip(colour[ch] * ramp[m] + 0.1, 0.0, 1.0)
        semantic[m] = cfg.num_stuff + cls
        dist[m] = d + 0.3 * along[m] / 2
        orientations[idx] = phi_deg
    instance = inst

    depth = 1.0 / (1.0 + dist)
    depth = (depth - 1.0 / 7.0) / (1.0 - 1.0 / 7.0)
    if cfg.depth_noise:
        depth = depth + rng.normal(0.0, 0.01, size=depth.shape)
    depth = np.clip(depth, 0.0, 1.0)[None]
    sample = SceneSample(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=depth.astype(np.float32),
        semantic=semantic,
        instance=instance,
        orientations={int(k): float(np.float32(v)) for k, v in orientations.items()},
        scene_class=scene,
    )
    sample.validate(range(cfg.num_stuff, cfg.num_stuff + num_things))
    return sample


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    semantic_names: List[str]
    scene_names: List[str]
    stuff: List[int]
    things: List[int]
    samples: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            "format=mtscene-dataset",
            "version=1",
            f"count={len(self.samples)}",
            f"semantic_classes={','.join(self.semantic_names)}",
            f"scene_classes={','.join(self.scene_names)}",
            f"stuff={','.join(map(str, self.stuff))}",
            f"things={','.join(map(str, self.things))}",
        ]
        return "\n".join(lines + self.samples) + "\n"

    @classmethod
    def parse(cls, text: str, source: str = "manifest.txt") -> "DatasetManifest":
        kv, paths = {}, []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
            else:
                paths.append(line)
        try:
            if kv["format"] != "mtscene-dataset":
                raise DataError(f"{source}: unknown format {kv['format']!r}")
            ints = lambda s: [int(x) for x in s.split(",") if x]
            m = cls(kv["semantic_classes"].split(","), kv["scene_classes"].split(","),
                    ints(kv["stuff"]), ints(kv["things"]), paths)
            count = int(kv["count"])
        except KeyError as e:
            raise DataError(f"{source}: missing key {e.args[0]}") from None
        if count != len(paths):
            raise DataError(f"{source}: count={count} but {len(paths)} sample paths")
        if sorted(m.stuff + m.things) != list(range(len(m.semantic_names))):
            raise DataError(f"{source}: class ids must be contiguous from 0")
        return m


def default_manifest(cfg: DataConfig, num_things: int, num_scenes: int) -> DatasetManifest:
    stuff = [STUFF_NAMES[k] if k < len(STUFF_NAMES) else f"stuff{k}" for k in range(cfg.num_stuff)]
    things = [THING_SHAPES[k % len(THING_SHAPES)] + (str(k // len(THING_SHAPES)) if k >= len(THING_SHAPES) else "")
              for k in range(num_things)]
    return DatasetManifest(
        semantic_names=stuff + things,
        scene_names=[f"scene{k}" for k in range(num_scenes)],
        stuff=list(range(cfg.num_stuff)),
        things=list(range(cfg.num_stuff, cfg.num_stuff + num_things)),
    )


def write_sample(directory: PathLike, s: SceneSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "rgb.mt", s.rgb)
    write_tensor(d / "depth.mt", s.depth)
    write_tensor(d / "semantic.mt", s.semantic.astype(np.float32))
    write_tensor(d / "instance.mt", s.instance.astype(np.float32))
    table = np.array([[i, s.orientations[i]] for i in sorted(s.orientations)], dtype=np.float32).reshape(-1, 2)
    write_tensor(d / "orient.mt", table)
    atomic_write_text(d / "scene.txt", f"{s.scene_class}\n")


def read_sample(directory: PathLike) -> SceneSample:
    d = Path(directory)
    for name in ("rgb.mt", "depth.mt", "semantic.mt", "instance.mt", "orient.mt", "scene.txt"):
        if not (d / name).is_file():
            raise DataError(f"missing file {d / name}")
    table = read_tensor(d / "orient.mt")
    if table.ndim != 2 or table.shape[1] != 2:
        raise DataError(f"{d / 'orient.mt'}: expected an n x 2 table")
    try:
        scene = int((d / "scene.txt").read_text().strip())
    except ValueError:
        raise DataError(f"{d / 'scene.txt'}: not an integer") from None
    return SceneSample(
        rgb=read_tensor(d / "rgb.mt"),
        depth=read_tensor(d / "depth.mt"),
        semantic=read_tensor(d / "semantic.mt").astype(np.int64),
        instance=read_tensor(d / "instance.mt").astype(np.int64),
        orientations={int(i): float(a) for i, a in table},
        scene_class=scene,
    )


def write_dataset(directory: PathLike, samples: Sequence[SceneSample], manifest: DatasetManifest) -> DatasetManifest:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, s in enumerate(samples):
        rel = f"sample_{k:05d}"
        write_sample(d / rel, s)
        paths.append(rel)
    manifest = DatasetManifest(manifest.semantic_names, manifest.scene_names, manifest.stuff, manifest.things, paths)
    atomic_write_text(d / "manifest.txt", manifest.to_text())
    return manifest


def load_dataset(directory: PathLike):
    """Read and validate a dataset directory; returns (manifest, samples)."""
    d = Path(directory)
    mpath = d / "manifest.txt"
    if not mpath.is_file():
        raise DataError(f"missing file {mpath}")
    manifest = DatasetManifest.parse(mpath.read_text(), str(mpath))
    samples = []
    for rel in manifest.samples:
        try:
            s = read_sample(d / rel)
            s.validate(manifest.things)
        except (DataError, FormatError) as e:
            raise DataError(f"{d / rel}: {e}") from None
        if not 0 <= s.scene_class < len(manifest.scene_names):
            raise DataError(f"{d / rel}: scene class {s.scene_class} out of range")
        if s.semantic.min() < 0 or s.semantic.max() >= len(manifest.semantic_names):
            raise DataError(f"{d / rel}: semantic id out of range")
        samples.append(s)
    return manifest, samples
