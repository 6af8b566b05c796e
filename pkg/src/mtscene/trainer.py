"""Training loop, checkpoint round trip and dataset evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import losses as L
from . import nn
from .config import Config
from .data import SceneSample
from .fusion import PanopticMap
from .metrics import MetricAccumulator, MetricReport
from .model import forward, init_model, panoptic_from_prediction, predict
from .scheduler import SchedulerState, step as scheduler_step, weighted_total
from .tensor import NonFiniteError, Tensor

LOG_COLUMNS = ("iteration",) + tuple(f"L_{t}" for t in L.TASKS) + tuple(f"W_{t}" for t in L.TASKS) + ("total",)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not fit the configured model."""


@dataclass
class LevelTargets:
    scale: int
    heatmap: np.ndarray       # N x 1 x h x w
    offsets: np.ndarray       # N x 2 x h x w
    offset_mask: np.ndarray   # N x h x w
    orientation: np.ndarray   # N x 2 x h x w
    orientation_mask: np.ndarray


@dataclass
class TrainResult:
    params: nn.Params
    log: List[tuple] = field(default_factory=list)
    scheduler: Optional[SchedulerState] = None

    def log_text(self) -> str:
        return format_log(self.log)


def format_log(rows: Sequence[tuple]) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        lines.append("\t".join([str(r[0])] + [f"{v:.9g}" for v in r[1:]]))
    return "\n".join(lines) + "\n"


def level_scales() -> List[int]:
    """Input pixels per cell at each instance decoder level, coarse to fine."""
    return [2 ** (4 - layer) for layer in range(3)]


def sample_targets(s: SceneSample, scales: Sequence[int], sigma: float):
    out = []
    for scale in scales:
        ct = L.encode_center_targets(s.instance, scale, sigma)
        ot, om = L.encode_orientation_targets(s.instance, s.orientations, scale)
        out.append((ct, ot, om))
    return out


def stack_targets(per_sample, scales) -> List[LevelTargets]:
    levels = []
    for k, scale in enumerate(scales):
        items = [p[k] for p in per_sample]
        levels.append(LevelTargets(
            scale=scale,
            heatmap=np.stack([ct.heatmap for ct, _, _ in items])[:, None],
            offsets=np.stack([ct.offsets for ct, _, _ in items]),
            offset_mask=np.stack([ct.valid_mask for ct, _, _ in items]),
            orientation=np.stack([ot for _, ot, _ in items]),
            orientation_mask=np.stack([om for _, _, om in items]),
        ))
    return levels


def compute_losses(out, semantic: np.ndarray, scene: np.ndarray, levels: Sequence[LevelTargets],
                   lcfg: L.LossConfig, pyramid: bool) -> L.LossBatch:
    """The five task losses; pyramid terms are averaged over supervised levels.

    Offset and orientation levels whose masks are empty are skipped.
    """
    pairs = list(zip(out.levels, levels))
    if not pyramid:
        pairs = pairs[-1:]

    def avg(terms):
        if not terms:
            raise TrainingError("no pyramid level has supervised pixels in this batch")
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))

    terms = {
        "se": lambda: L.semantic_loss(out.semantic_logits, semantic, lcfg.ignore_id),
        "ce": lambda: avg([L.center_loss(o.center, t.heatmap) for o, t in pairs]),
        "of": lambda: avg([L.offset_loss(o.offset, t.offsets, t.offset_mask)
                           for o, t in pairs if t.offset_mask.any()]),
        "or": lambda: avg([L.orientation_loss(o.orientation, t.orientation, lcfg.kappa, t.orientation_mask)
                           for o, t in pairs if t.orientation_mask.any()]),
        "sc": lambda: L.scene_loss(out.scene_logits, scene),
    }
    values = []
    for name in L.TASKS:
        try:
            values.append(terms[name]())
        except NonFiniteError as e:
            raise TrainingError(f"loss L_{name} is not finite ({e})") from None
    return L.LossBatch(*values)


def batch_arrays(samples: Sequence[SceneSample]):
    x = np.stack([s.rgbd() for s in samples]).astype(np.float32)
    sem = np.stack([s.semantic for s in samples])
    scene = np.array([s.scene_class for s in samples])
    return x, sem, scene


def batch_schedule(n: int, batch_size: int, iterations: int, seed: int, shuffle: bool) -> List[np.ndarray]:
    """Deterministic list of index batches; epochs are consecutive permutations."""
    rng = np.random.default_rng([seed, 7])
    per_epoch = max(1, math.ceil(n / batch_size))
    out: List[np.ndarray] = []
    while len(out) < iterations:
        order = rng.permutation(n) if shuffle else np.arange(n)
        for b in range(per_epoch):
            out.append(np.sort(order[b * batch_size : (b + 1) * batch_size]))
    return out[:iterations]


def _quiet_overflow():
    # every op checks its result, so numpy's own overflow warnings are redundant
    return np.errstate(over="ignore", invalid="ignore")


def train(cfg: Config, samples: Sequence[SceneSample],
          on_step: Optional[Callable[[int, tuple], None]] = None) -> TrainResult:
    if not samples:
        raise ValueError("training needs at least one sample")
    mcfg = cfg.model()
    lcfg = cfg.losses()
    scfg = cfg.scheduler()
    check_samples(cfg, samples)
    params = init_model(mcfg, cfg["train.seed"])
    scales = level_scales()
    targets = [sample_targets(s, scales, lcfg.center_sigma) for s in samples]

    bs = cfg["train.batch_size"]
    per_epoch = max(1, math.ceil(len(samples) / bs))
    iterations = cfg["train.epochs"] * per_epoch if cfg["train.epochs"] > 0 else cfg["train.iterations"]
    schedule = batch_schedule(len(samples), bs, iterations, cfg["train.seed"], cfg["train.shuffle"])

    state = SchedulerState.create(scfg)
    lr0, mom, wd = cfg["train.lr"], cfg["train.momentum"], cfg["train.weight_decay"]
    names = [k for k, t in params.items() if t.requires_grad]
    velocity = {k: np.zeros_like(params[k].data) for k in names}
    rows: List[tuple] = []

    for it, idx in enumerate(schedule, start=1):
        batch = [samples[i] for i in idx]
        x, sem, scene = batch_arrays(batch)
        lvl = stack_targets([targets[i] for i in idx], scales)
        weights = state.weights.copy() if scfg.mode == "adaptive" else state.base_weights.copy()
        for k in names:
            params[k].grad = None
        try:
            with _quiet_overflow():
                out = forward(params, Tensor(x), mcfg, training=True)
                losses = compute_losses(out, sem, scene, lvl, lcfg, mcfg.instance.pyramid_supervision)
        except NonFiniteError as e:
            raise TrainingError(f"batch {it}: non-finite value in forward pass ({e})") from None
        except TrainingError as e:
            raise TrainingError(f"batch {it}: {e}") from None
        values = losses.values()
        for name, v in zip(L.TASKS, values):
            if not math.isfinite(v):
                raise TrainingError(f"batch {it}: loss L_{name} is not finite")
        total = weighted_total(losses.as_list(), weights)
        try:
            with _quiet_overflow():
                total.backward()
        except NonFiniteError as e:
            raise TrainingError(f"batch {it}: non-finite gradient ({e})") from None

        lr = lr0 * 0.5 * (1.0 + math.cos(math.pi * (it - 1) / iterations)) if cfg["train.cosine"] else lr0
        for k in names:
            p = params[k]
            g = p.grad if p.grad is not None else 0.0
            v = velocity[k]
            v *= mom
            v += g + wd * p.data
            p.data = (p.data - lr * v).astype(p.data.dtype)
        if scfg.mode == "adaptive":
            scheduler_step(state, values)
        row = (it, *values, *[float(w) for w in weights], float(total.data))
        rows.append(row)
        if on_step is not None:
            on_step(it, row)
    return TrainResult(params, rows, state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def params_to_arrays(params: nn.Params) -> Dict[str, np.ndarray]:
    return {k: np.asarray(t.data, dtype=np.float32) for k, t in params.items()}


def params_from_arrays(cfg: Config, arrays: Mapping[str, np.ndarray]) -> nn.Params:
    """Load checkpoint arrays into a freshly built model, checking names and shapes."""
    params = init_model(cfg.model(), 0)
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint does not fit the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, t in params.items():
        a = arrays[k]
        if a.shape != t.shape:
            raise CheckpointMismatch(f"{k}: checkpoint shape {a.shape} vs model shape {t.shape}")
        t.data = a.astype(t.data.dtype)
    return params


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def check_samples(cfg: Config, samples: Sequence[SceneSample]) -> None:
    k = cfg["semantic.num_classes"]
    h, w = cfg["data.height"], cfg["data.width"]
    for n, s in enumerate(samples):
        if s.semantic.shape != (h, w):
            raise ValueError(f"sample {n}: extents {s.semantic.shape} differ from configured {(h, w)}")
        if s.semantic.max() >= k:
            raise ValueError(f"sample {n}: semantic id {int(s.semantic.max())} >= semantic.num_classes={k}")
        if not 0 <= s.scene_class < cfg["scene.num_classes"]:
            raise ValueError(f"sample {n}: scene class {s.scene_class} >= scene.num_classes")


def ground_truth_panoptic(s: SceneSample) -> PanopticMap:
    return PanopticMap(s.semantic.astype(np.int64), s.instance.astype(np.int64), dict(s.orientations))


def infer(cfg: Config, params: nn.Params, samples: Sequence[SceneSample]):
    """Panoptic maps and scene predictions, batched by train.batch_size."""
    mcfg, fcfg = cfg.model(), cfg.fusion()
    bs = cfg["train.batch_size"]
    results = []
    for start in range(0, len(samples), bs):
        chunk = samples[start : start + bs]
        x, _, _ = batch_arrays(chunk)
        for p in predict(params, x, mcfg):
            pan = panoptic_from_prediction(p, fcfg)
            results.append((np.argmax(p.semantic_logits, axis=0), pan, int(np.argmax(p.scene_logits))))
    return results


def evaluate(cfg: Config, params: nn.Params, samples: Sequence[SceneSample]) -> MetricReport:
    check_samples(cfg, samples)
    acc = MetricAccumulator(cfg["semantic.num_classes"], cfg.thing_classes(), cfg["scene.num_classes"])
    for s, (sem, pan, scene) in zip(samples, infer(cfg, params, samples)):
        acc.add(sem, s.semantic, pan, ground_truth_panoptic(s), scene, s.scene_class)
    return acc.report()
