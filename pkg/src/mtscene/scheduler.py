"""History-based adaptive task weighting and a synthetic benchmark for it."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from .losses import TASKS


@dataclass
class SchedulerConfig:
    mode: str = "adaptive"
    alpha: float = 0.01
    w_min: float = 0.1
    window: int = 1000
    base_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        self.base_weights = tuple(float(w) for w in self.base_weights)
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError("scheduler mode must be 'fixed' or 'adaptive'")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if len(self.base_weights) != len(TASKS):
            raise ValueError(f"need {len(TASKS)} base weights")


@dataclass
class SchedulerState:
    task_names: Tuple[str, ...]
    base_weights: np.ndarray
    alpha: float
    w_min: float
    window: int
    histories: List[Deque[float]] = field(default_factory=list)
    weights: np.ndarray = None

    @classmethod
    def create(cls, cfg: SchedulerConfig, task_names: Sequence[str] = TASKS) -> "SchedulerState":
        base = np.array(cfg.base_weights, dtype=np.float64)
        return cls(
            task_names=tuple(task_names),
            base_weights=base,
            alpha=cfg.alpha,
            w_min=cfg.w_min,
            window=cfg.window,
            histories=[deque(maxlen=cfg.window) for _ in task_names],
            weights=np.maximum(base, cfg.w_min),  # floored before any history exists
        )

    def avg_relative_losses(self) -> np.ndarray:
        return np.array([sum(h) / len(h) if h else np.nan for h in self.histories])

    def snapshot(self) -> dict:
        return {
            "weights": self.weights.copy(),
            "avg_rl": self.avg_relative_losses(),
            "counts": [len(h) for h in self.histories],
        }


def relative_losses(losses: Sequence[float]) -> np.ndarray:
    values = np.asarray([float(v) for v in losses], dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("task losses must be nonnegative")
    total = values.sum()
    if not total > 0:
        raise ValueError("total loss must be positive")
    return values / total


def update_history(state: SchedulerState, rl: Sequence[float]) -> SchedulerState:
    if len(rl) != len(state.histories):
        raise ValueError("relative loss count does not match task count")
    for h, v in zip(state.histories, rl):
        h.append(float(v))
    return state


def update_weights(state: SchedulerState) -> SchedulerState:
    avg = state.avg_relative_losses()
    if np.any(~(avg > 0)):
        raise ValueError(f"average relative losses must be positive, got {avg.tolist()}")
    state.weights = np.maximum(state.base_weights * avg ** state.alpha, state.w_min)
    return state


def step(state: SchedulerState, losses: Sequence[float]) -> SchedulerState:
    """One end-of-batch update: relative losses, history, new weights."""
    return update_weights(update_history(state, relative_losses(losses)))


def weighted_total(losses: Sequence, weights: Sequence[float]):
    """Sum of weight * loss; weights enter as constants."""
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses but {len(weights)} weights")
    total = None
    for l, w in zip(losses, weights):
        term = l * float(w)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# synthetic loss-stream benchmark
# ---------------------------------------------------------------------------


@dataclass
class StreamSpec:
    """Five tasks sharing one parameter vector under noisy gradient descent.

    Task k has loss ``scale_k * 0.5 * |theta - target_k|^2 + floor_k``. Each
    batch the shared parameters move along the weighted sum of the task
    gradients, each perturbed by Gaussian noise of size ``noise_k``. The
    reported per-epoch value is the mean weighted total over its batches.
    """

    epochs: int = 60
    batches_per_epoch: int = 20
    dim: int = 8
    lr: float = 0.05
    scales: Tuple[float, ...] = (1.0, 0.5, 2.0, 0.25, 1.5)
    noise: Tuple[float, ...] = (0.6, 0.3, 0.9, 0.2, 0.5)
    floors: Tuple[float, ...] = (0.2, 0.05, 0.1, 0.3, 0.15)
    target_spread: float = 1.0
    init_spread: float = 2.0


@dataclass
class BenchReport:
    epochs: int
    fixed_trace: np.ndarray      # mean over seeds, per epoch
    adaptive_trace: np.ndarray
    fixed_var: np.ndarray        # cross-seed variance, per epoch
    adaptive_var: np.ndarray
    min_adaptive_weight: float

    def tail_variance(self) -> Tuple[float, float]:
        half = self.epochs // 2
        return float(self.fixed_var[half:].mean()), float(self.adaptive_var[half:].mean())


def _run_stream(stream: StreamSpec, seed: int, mode: str, cfg: SchedulerConfig) -> Tuple[np.ndarray, float]:
    rng = np.random.default_rng(seed)
    k = len(stream.scales)
    # targets are fixed by the benchmark, not by the seed
    targets = np.random.default_rng(12345).normal(0.0, stream.target_spread, size=(k, stream.dim))
    theta = rng.normal(0.0, stream.init_spread, size=stream.dim)
    scales = np.asarray(stream.scales)
    noise = np.asarray(stream.noise)
    floors = np.asarray(stream.floors)
    state = SchedulerState.create(cfg)
    trace = np.zeros(stream.epochs)
    w_lowest = np.inf
    for e in range(stream.epochs):
        acc = 0.0
        for _ in range(stream.batches_per_epoch):
            diff = theta - targets
            losses = scales * 0.5 * (diff * diff).sum(axis=1) + floors
            w = state.weights if mode == "adaptive" else state.base_weights
            w_lowest = min(w_lowest, float(w.min()))
            acc += float(weighted_total(list(losses), w))
            grads = scales[:, None] * diff + noise[:, None] * rng.normal(size=(k, stream.dim))
            theta = theta - stream.lr * (w[:, None] * grads).sum(axis=0)
            if mode == "adaptive":
                step(state, losses)
        trace[e] = acc / stream.batches_per_epoch
    return trace, w_lowest


def simulate_scheduler(stream: StreamSpec, seeds: Sequence[int], cfg: Optional[SchedulerConfig] = None) -> BenchReport:
    """Run fixed and adaptive weighting over identical seeded streams."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("simulate_scheduler needs at least one seed")
    cfg = cfg or SchedulerConfig()
    runs = {"fixed": [], "adaptive": []}
    w_low = np.inf
    for mode in runs:
        for s in seeds:
            trace, lo = _run_stream(stream, s, mode, cfg)
            runs[mode].append(trace)
            if mode == "adaptive":
                w_low = min(w_low, lo)
    fixed = np.stack(runs["fixed"])
    adaptive = np.stack(runs["adaptive"])
    return BenchReport(
        epochs=stream.epochs,
        fixed_trace=fixed.mean(axis=0),
        adaptive_trace=adaptive.mean(axis=0),
        fixed_var=fixed.var(axis=0),
        adaptive_var=adaptive.var(axis=0),
        min_adaptive_weight=w_low,
    )
