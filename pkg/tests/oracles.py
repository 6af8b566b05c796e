"""Brute-force reference implementations used by the tests."""

from fractions import Fraction

import numpy as np


def nearest_center_grouping(centers, offsets, foreground):
    h, w = foreground.shape
    out = np.zeros((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            if not foreground[r, c]:
                continue
            pr, pc = r + offsets[0, r, c], c + offsets[1, r, c]
            best, best_d = 0, None
            for k, (cr, cc, *_) in enumerate(centers):
                d = (pr - cr) ** 2 + (pc - cc) ** 2
                if best_d is None or d < best_d:
                    best, best_d = k + 1, d
            out[r, c] = best
    return out


def segments(category, instance, keep):
    segs = {}
    h, w = category.shape
    for r in range(h):
        for c in range(w):
            if keep[r, c] and category[r, c] != 255:
                segs.setdefault((int(category[r, c]), int(instance[r, c])), set()).add((r, c))
    return segs


def panoptic_stats(pred, truth, classes):
    """Per-class (tp, fp, fn, iou_sum) by exhaustive segment matching."""
    keep = truth.category != 255
    ps = segments(pred.category, pred.instance, keep)
    ts = segments(truth.category, truth.instance, keep)
    stats = {c: [0, 0, 0, Fraction(0)] for c in classes}
    matched_p, matched_t = set(), set()
    for pk, pp in ps.items():
        for tk, tp in ts.items():
            if pk[0] != tk[0]:
                continue
            inter = len(pp & tp)
            union = len(pp | tp)
            if Fraction(inter, union) > Fraction(1, 2):
                stats[pk[0]][0] += 1
                stats[pk[0]][3] += Fraction(inter, union)
                matched_p.add(pk)
                matched_t.add(tk)
    for pk in ps:
        if pk not in matched_p:
            stats[pk[0]][1] += 1
    for tk in ts:
        if tk not in matched_t:
            stats[tk[0]][2] += 1
    return stats


def panoptic_quality(pred, truth, classes):
    stats = panoptic_stats(pred, truth, classes)
    per = []
    for tp, fp, fn, s in stats.values():
        if tp + fp + fn == 0:
            continue
        per.append(s / (tp + Fraction(fp, 2) + Fraction(fn, 2)))
    return sum(per, Fraction(0)) / len(per) if per else Fraction(0)


def confusion_miou(pred, truth, num_classes, ignore_id=255):
    ious = []
    for k in range(num_classes):
        tp = fp = fn = 0
        for p, t in zip(np.ravel(pred), np.ravel(truth)):
            if t == ignore_id:
                continue
            tp += p == k and t == k
            fp += p == k and t != k
            fn += p != k and t == k
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return float(np.mean(ious))
