"""mIoU, PQ/SQ/RQ, MAAE and balanced accuracy with mergeable accumulators.

Panoptic statistics are kept as exact fractions (IoUs are ratios of pixel
counts), so PQ = SQ * RQ holds exactly rather than up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .fusion import PanopticMap

HALF = Fraction(1, 2)


# ---------------------------------------------------------------------------
# semantic
# ---------------------------------------------------------------------------


class ConfusionAccumulator:
    def __init__(self, num_classes: int, ignore_id: int = 255):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if pred.shape != truth.shape:
            raise ValueError("prediction and truth differ in extent")
        k = self.num_classes
        valid = (truth != self.ignore_id) & (truth >= 0) & (truth < k) & (pred >= 0) & (pred < k)
        self.matrix += np.bincount(truth[valid] * k + pred[valid], minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes, self.ignore_id)
        out.matrix = self.matrix + other.matrix
        return out

    def per_class_iou(self) -> Dict[int, float]:
        tp = np.diag(self.matrix)
        fp = self.matrix.sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp
        denom = tp + fp + fn
        return {c: float(tp[c] / denom[c]) for c in range(self.num_classes) if denom[c] > 0}

    def miou(self) -> float:
        ious = self.per_class_iou()
        if not ious:
            raise ValueError("mIoU undefined: no class present in prediction or truth")
        return float(np.mean(list(ious.values())))


def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int, ignore_id: int = 255):
    acc = ConfusionAccumulator(num_classes, ignore_id)
    acc.add(pred, truth)
    return acc.miou(), acc.per_class_iou()


# ---------------------------------------------------------------------------
# panoptic
# ---------------------------------------------------------------------------


@dataclass
class PQStat:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: Fraction = Fraction(0)

    def __add__(self, other: "PQStat") -> "PQStat":
        return PQStat(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.iou_sum + other.iou_sum)

    @property
    def active(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def pq(self) -> Fraction:
        d = self.tp + HALF * self.fp + HALF * self.fn
        return self.iou_sum / d if d else Fraction(0)

    def sq(self) -> Fraction:
        return self.iou_sum / self.tp if self.tp else Fraction(0)

    def rq(self) -> Fraction:
        d = self.tp + HALF * self.fp + HALF * self.fn
        return Fraction(self.tp) / d if d else Fraction(0)


def _segments(pan: PanopticMap, void_id: int, valid: np.ndarray) -> Tuple[np.ndarray, int]:
    # key = category * (max_instance + 1) + instance; -1 for void
    mult = int(pan.instance.max()) + 1 if pan.instance.size else 1
    key = pan.category.astype(np.int64) * mult + pan.instance.astype(np.int64)
    key = np.where((pan.category == void_id) | ~valid, -1, key)
    return key, mult


def match_segments(pred: PanopticMap, truth: PanopticMap, classes: Iterable[int], void_id: int = 255):
    """Per-class PQ statistics and the list of matched segments.

    Returns ``(stats, matches)`` where ``matches`` holds tuples
    ``(category, pred_instance, true_instance, iou)`` for every true positive.
    """
    classes = set(int(c) for c in classes)
    if pred.category.shape != truth.category.shape:
        raise ValueError("panoptic maps differ in extent")
    for name, pan in (("prediction", pred), ("truth", truth)):
        cats = set(np.unique(pan.category).tolist()) - {void_id}
        if not cats <= classes:
            raise ValueError(f"{name} contains categories {sorted(cats - classes)} outside the class set")
    valid = truth.category != void_id
    pk, pm = _segments(pred, void_id, valid)
    tk, tm = _segments(truth, void_id, valid)

    def areas(keys):
        u, c = np.unique(keys[keys >= 0], return_counts=True)
        return dict(zip(u.tolist(), c.tolist()))

    p_area, t_area = areas(pk), areas(tk)
    both = (pk >= 0) & (tk >= 0)
    pairs, inter = np.unique(np.stack([pk[both], tk[both]]), axis=1, return_counts=True)
    stats = {c: PQStat() for c in classes}
    matched_p, matched_t, matches = set(), set(), []
    for (p, t), n in zip(pairs.T.tolist(), inter.tolist()):
        pc, tc = p // pm, t // tm
        if pc != tc:
            continue
        union = p_area[p] + t_area[t] - n
        if 2 * n > union:
            iou = Fraction(n, union)
            stats[pc].tp += 1
            stats[pc].iou_sum += iou
            matched_p.add(p)
            matched_t.add(t)
            matches.append((pc, p % pm, t % tm, iou))
    for p in p_area:
        if p not in matched_p:
            stats[p // pm].fp += 1
    for t in t_area:
        if t not in matched_t:
            stats[t // tm].fn += 1
    return stats, matches


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    per_class: Dict[int, Tuple[float, float, float]]


def summarize_pq(stats: Mapping[int, PQStat], subset: Optional[Iterable[int]] = None) -> PQResult:
    keys = sorted(stats) if subset is None else sorted(set(subset) & set(stats))
    active = [c for c in keys if stats[c].active]
    per = {}
    for c in active:
        s = stats[c]
        pq, sq, rq = s.pq(), s.sq(), s.rq()
        if pq != sq * rq:
            raise AssertionError(f"PQ != SQ * RQ for class {c}")
        per[c] = (float(pq), float(sq), float(rq))
    if not active:
        return PQResult(0.0, 0.0, 0.0, per)
    n = len(active)
    pq = sum((stats[c].pq() for c in active), Fraction(0)) / n
    sq = sum((stats[c].sq() for c in active), Fraction(0)) / n
    rq = sum((stats[c].rq() for c in active), Fraction(0)) / n
    return PQResult(float(pq), float(sq), float(rq), per)


def panoptic_quality(pred: PanopticMap, truth: PanopticMap, things: Iterable[int], stuff: Iterable[int],
                     void_id: int = 255) -> PQResult:
    stats, _ = match_segments(pred, truth, set(things) | set(stuff), void_id)
    return summarize_pq(stats)


# ---------------------------------------------------------------------------
# orientation and scene
# ---------------------------------------------------------------------------


def angular_error(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def maae(pred_orient: Mapping[int, Optional[float]], true_orient: Mapping[int, float],
         matches: Sequence[Tuple[int, int]]) -> Optional[float]:
    """Mean wrapped angular error over (pred id, true id) pairs.

    Returns None for an empty match set. An undefined prediction counts as
    the maximal error of 180 degrees.
    """
    errs = [
        180.0 if pred_orient.get(p) is None else angular_error(pred_orient[p], true_orient[t])
        for p, t in matches
    ]
    return float(np.mean(errs)) if errs else None


def balanced_accuracy(pred: Sequence[int], truth: Sequence[int], num_classes: int) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("balanced accuracy of an empty sample set")
    recalls = [float(np.mean(pred[truth == c] == c)) for c in range(num_classes) if np.any(truth == c)]
    return float(np.mean(recalls))


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------


@dataclass
class MetricAccumulator:
    num_classes: int
    thing_classes: frozenset
    num_scene_classes: int
    void_id: int = 255
    confusion: ConfusionAccumulator = None
    pq_stats: Dict[int, PQStat] = None
    angle_errors: List[float] = field(default_factory=list)
    scene_pred: List[int] = field(default_factory=list)
    scene_true: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = ConfusionAccumulator(self.num_classes, self.void_id)
        if self.pq_stats is None:
            self.pq_stats = {c: PQStat() for c in range(self.num_classes)}

    def add(self, semantic_pred: np.ndarray, semantic_true: np.ndarray, pan_pred: PanopticMap,
            pan_true: PanopticMap, scene_pred: int, scene_true: int) -> None:
        self.confusion.add(semantic_pred, semantic_true)
        stats, matches = match_segments(pan_pred, pan_true, range(self.num_classes), self.void_id)
        for c, s in stats.items():
            self.pq_stats[c] = self.pq_stats[c] + s
        pairs = [(p, t) for c, p, t, _ in matches if c in self.thing_classes]
        for p, t in pairs:
            po = pan_pred.orientations.get(p)
            self.angle_errors.append(180.0 if po is None else angular_error(po, pan_true.orientations[t]))
        self.scene_pred.append(int(scene_pred))
        self.scene_true.append(int(scene_true))

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        out = MetricAccumulator(self.num_classes, self.thing_classes, self.num_scene_classes, self.void_id)
        out.confusion = self.confusion.merge(other.confusion)
        out.pq_stats = {c: self.pq_stats[c] + other.pq_stats[c] for c in self.pq_stats}
        out.angle_errors = self.angle_errors + other.angle_errors
        out.scene_pred = self.scene_pred + other.scene_pred
        out.scene_true = self.scene_true + other.scene_true
        return out

    def report(self) -> "MetricReport":
        overall = summarize_pq(self.pq_stats)
        things = summarize_pq(self.pq_stats, self.thing_classes)
        stuff = summarize_pq(self.pq_stats, set(range(self.num_classes)) - set(self.thing_classes))
        support = self.confusion.matrix.sum(axis=1)
        return MetricReport(
            semantic_miou=self.confusion.miou(),
            per_class_iou=self.confusion.per_class_iou(),
            pq=overall.pq, sq=overall.sq, rq=overall.rq,
            things_pq=things.pq, things_sq=things.sq, things_rq=things.rq,
            stuff_pq=stuff.pq,
            per_class_pq=overall.per_class,
            maae_degrees=float(np.mean(self.angle_errors)) if self.angle_errors else None,
            scene_bacc=balanced_accuracy(self.scene_pred, self.scene_true, self.num_scene_classes),
            support={c: int(support[c]) for c in range(self.num_classes)},
            matched_instances=len(self.angle_errors),
        )


@dataclass
class MetricReport:
    semantic_miou: float
    per_class_iou: Dict[int, float]
    pq: float
    sq: float
    rq: float
    things_pq: float
    things_sq: float
    things_rq: float
    stuff_pq: float
    per_class_pq: Dict[int, Tuple[float, float, float]]
    maae_degrees: Optional[float]
    scene_bacc: float
    support: Dict[int, int]
    matched_instances: int

    def key_values(self) -> List[Tuple[str, str]]:
        def fmt(v):
            return "absent" if v is None else f"{v:.6f}"

        rows = [
            ("semantic_miou", fmt(self.semantic_miou)),
            ("panoptic_pq", fmt(self.pq)),
            ("panoptic_sq", fmt(self.sq)),
            ("panoptic_rq", fmt(self.rq)),
            ("things_pq", fmt(self.things_pq)),
            ("things_sq", fmt(self.things_sq)),
            ("things_rq", fmt(self.things_rq)),
            ("stuff_pq", fmt(self.stuff_pq)),
            ("maae_degrees", fmt(self.maae_degrees)),
            ("scene_bacc", fmt(self.scene_bacc)),
            ("matched_instances", str(self.matched_instances)),
        ]
        for c in sorted(self.support):
            rows.append((f"class{c}.support", str(self.support[c])))
            rows.append((f"class{c}.iou", fmt(self.per_class_iou.get(c))))
            pq = self.per_class_pq.get(c)
            rows.append((f"class{c}.pq", fmt(pq[0] if pq else None)))
        return rows

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.key_values())

    def to_table(self) -> str:
        rows = self.key_values()
        width = max(len(k) for k, _ in rows)
        lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  ------"]
        lines += [f"{k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines) + "\n"
