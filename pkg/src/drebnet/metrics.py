"""Detection scoring: greedy IoU matching, all-point AP, mAP/mAR, size strata, PR/ROC export.

Ground truth is given as ``{image_id: [GroundTruthBox, ...]}`` (a plain list
means a single image with id 0); detections carry their ``image_id``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .boxes import Detection, GroundTruthBox, iou

AREA_BOUNDS = (32.0 ** 2, 96.0 ** 2)
ROC_BUDGET_PER_IMAGE = 100
UNDEFINED = float("nan")


@dataclass
class MatchLedger:
    order: list[int]  # detection indices in ranked order
    tp: list[bool]  # per ranked detection
    gt_match: list[int]  # per GT: ranked position of its detection, or -1
    det_gt: list[int]  # per ranked detection: matched GT index or -1

    @property
    def num_tp(self) -> int:
        return sum(self.tp)

    @property
    def num_fp(self) -> int:
        return len(self.tp) - self.num_tp

    @property
    def num_fn(self) -> int:
        return sum(1 for m in self.gt_match if m < 0)


def rank(dets) -> list[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets, gts, iou_thresh: float = 0.5) -> MatchLedger:
    """Greedy matching within one (image, class) group."""
    order = rank(dets)
    gt_boxes = [g.box if isinstance(g, GroundTruthBox) else tuple(g) for g in gts]
    gt_match = [-1] * len(gt_boxes)
    tp, det_gt = [], []
    for pos, i in enumerate(order):
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gt_boxes):
            if gt_match[j] >= 0:
                continue
            v = iou(dets[i].box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            gt_match[best] = pos
        tp.append(best >= 0)
        det_gt.append(best)
    return MatchLedger(order, tp, gt_match, det_gt)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return p, r


def _by_image(gts) -> dict:
    if isinstance(gts, dict):
        return gts
    return {0: list(gts)}


@dataclass
class RankedClass:
    """Per-class detections in global score order with TP flags, plus the GT count."""
    scores: list[float]
    tp: list[bool]
    npos: int
    n_images: int


def rank_class(dets, gts, class_id: int, iou_thresh: float = 0.5,
               gt_keep=None, det_keep=None) -> RankedClass:
    """Match per image then pool.  ``gt_keep``/``det_keep`` restrict a stratum:
    dets matched to excluded GTs are dropped, unmatched dets must pass det_keep."""
    gts = _by_image(gts)
    per_image: dict[int, list[Detection]] = {}
    for d in dets:
        if d.class_id == class_id:
            per_image.setdefault(d.image_id, []).append(d)
    pooled = []  # (score, image_id, rank-in-image, tp)
    npos = 0
    for image_id in sorted(set(gts) | set(per_image)):
        g = [b for b in gts.get(image_id, []) if b.class_id == class_id]
        keep_g = [gt_keep is None or gt_keep(b) for b in g]
        npos += sum(keep_g)
        ds = per_image.get(image_id, [])
        led = match_detections(ds, g, iou_thresh)
        for pos, i in enumerate(led.order):
            j = led.det_gt[pos]
            if j >= 0 and not keep_g[j]:
                continue
            if j < 0 and det_keep is not None and not det_keep(ds[i]):
                continue
            pooled.append((ds[i].score, image_id, pos, j >= 0))
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    return RankedClass([t[0] for t in pooled], [t[3] for t in pooled], npos, len(gts))


def pr_points(rc: RankedClass) -> list[tuple[float, Fraction, Fraction]]:
    """(threshold, recall, precision) at each distinct score, thresholds descending."""
    pts = []
    tp = fp = 0
    n = len(rc.scores)
    for i in range(n):
        tp += rc.tp[i]
        fp += not rc.tp[i]
        if i + 1 < n and rc.scores[i + 1] == rc.scores[i]:
            continue
        pts.append((rc.scores[i], Fraction(tp, rc.npos), Fraction(tp, tp + fp)))
    return pts


def _ap_from_points(pts) -> float:
    # all-point interpolation: precision envelope max_{r' >= r} P(r'), integrated over recall
    area = Fraction(0)
    envelope = Fraction(0)
    prev_r = Fraction(0)
    env = [Fraction(0)] * len(pts)
    for k in range(len(pts) - 1, -1, -1):
        envelope = max(envelope, pts[k][2])
        env[k] = envelope
    for k, (_, r, _) in enumerate(pts):
        area += (r - prev_r) * env[k]
        prev_r = r
    return float(area)


def average_precision(dets, gts, iou_thresh: float = 0.5, class_id: int | None = None) -> float:
    """All-point AP for one class; NaN when that class has no ground truth."""
    if class_id is None:
        classes = {d.class_id for d in dets} | {b.class_id for bs in _by_image(gts).values() for b in bs}
        if len(classes) > 1:
            raise ValueError("average_precision needs a single class; pass class_id")
        class_id = classes.pop() if classes else 0
    rc = rank_class(dets, gts, class_id, iou_thresh)
    if rc.npos == 0:
        return UNDEFINED
    return _ap_from_points(pr_points(rc))


def average_recall(dets, gts, iou_thresh: float = 0.5, class_id: int = 0) -> float:
    rc = rank_class(dets, gts, class_id, iou_thresh)
    return sum(rc.tp) / rc.npos if rc.npos else UNDEFINED


def mean_ap(per_class) -> float:
    """Unweighted mean over classes with a defined AP (present in the ground truth)."""
    vals = list(per_class.values()) if isinstance(per_class, dict) else list(per_class)
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        raise ValueError("mean_ap needs at least one class with ground truth")
    return float(np.mean(vals))


def gt_classes(gts) -> list[int]:
    return sorted({b.class_id for bs in _by_image(gts).values() for b in bs})


def per_class_ap(dets, gts, iou_thresh: float = 0.5) -> dict[int, float]:
    return {c: average_precision(dets, gts, iou_thresh, c) for c in gt_classes(gts)}


def per_class_ar(dets, gts, iou_thresh: float = 0.5) -> dict[int, float]:
    return {c: average_recall(dets, gts, iou_thresh, c) for c in gt_classes(gts)}


def area_band(area: float, bounds=AREA_BOUNDS) -> int:
    return 0 if area < bounds[0] else (1 if area < bounds[1] else 2)


def size_stratified_map(dets, gts, iou_thresh: float = 0.5, area_bounds=AREA_BOUNDS):
    """(mAP_s, mAP_m, mAP_l); a band with no ground truth is NaN."""
    out = []
    for band in range(3):
        aps = {}
        for c in gt_classes(gts):
            rc = rank_class(dets, gts, c, iou_thresh,
                            gt_keep=lambda b: area_band(b.area, area_bounds) == band,
                            det_keep=lambda d: area_band(d.area, area_bounds) == band)
            aps[c] = _ap_from_points(pr_points(rc)) if rc.npos else UNDEFINED
        defined = [v for v in aps.values() if not math.isnan(v)]
        out.append(float(np.mean(defined)) if defined else UNDEFINED)
    return tuple(out)


def roc_points(rc: RankedClass, budget: int = ROC_BUDGET_PER_IMAGE):
    """(threshold, FPR, TPR) from +inf to -inf.

    Negatives have no natural count in detection; the proxy is the top-k
    candidate budget per image minus the positives, and never below the
    observed false positives.
    """
    n_neg = max(budget * max(rc.n_images, 1) - rc.npos, len(rc.tp) - sum(rc.tp), 1)
    pts = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    n = len(rc.scores)
    for i in range(n):
        tp += rc.tp[i]
        fp += not rc.tp[i]
        if i + 1 < n and rc.scores[i + 1] == rc.scores[i]:
            continue
        pts.append((rc.scores[i], fp / n_neg, tp / rc.npos if rc.npos else 1.0))
    pts.append((-math.inf, 1.0, 1.0))
    return pts, n_neg


def trapezoid_auc(xy) -> float:
    xs = np.array([p[0] for p in xy], dtype=float)
    ys = np.array([p[1] for p in xy], dtype=float)
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))


def _fmt_thresh(t: float) -> str:
    return "inf" if t == math.inf else ("-inf" if t == -math.inf else repr(float(t)))


def export_curves(dets, gts, iou_list, out_dir) -> dict:
    """Write pr_c{class}_iou{t}.csv and roc_c{class}_iou{t}.csv; return ROC AUCs keyed (class, iou).

    PR rows: threshold, recall, precision, with a (+inf: recall 0, precision 1)
    start row and a -inf closing row repeating the final recall at precision 0.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aucs = {}
    for t in iou_list:
        for c in gt_classes(gts):
            rc = rank_class(dets, gts, c, t)
            pts = pr_points(rc)
            with open(out / f"pr_c{c}_iou{t:g}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "recall", "precision"])
                w.writerow(["inf", 0.0, 1.0])
                for s, r, p in pts:
                    w.writerow([_fmt_thresh(s), float(r), float(p)])
                w.writerow(["-inf", float(pts[-1][1]) if pts else 0.0, 0.0])
            roc, n_neg = roc_points(rc)
            auc = trapezoid_auc([(f, r) for _, f, r in roc])
            aucs[(c, t)] = auc
            with open(out / f"roc_c{c}_iou{t:g}.csv", "w", newline="") as fh:
                fh.write(f"# fpr = FP / N_neg, N_neg = max({ROC_BUDGET_PER_IMAGE} * images - positives, "
                         f"FP_total) = {n_neg}; auc = {auc:.6f}\n")
                w = csv.writer(fh)
                w.writerow(["threshold", "fpr", "tpr"])
                for s, f, r in roc:
                    w.writerow([_fmt_thresh(s), f, r])
    return aucs
