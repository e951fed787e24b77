"""Inference over a dataset, the metric report, and the detection interchange file."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .blur import psnr
from .boxes import Detection
from .engine import Tensor, no_grad
from .metrics import (
    export_curves,
    gt_classes,
    mean_ap,
    per_class_ap,
    per_class_ar,
    size_stratified_map,
)
from .model import DrebNet
from .targets import decode_batch


def predict(model: DrebNet, images, batch_size: int = 16, k_max: int = 100,
            score_thresh: float = 0.1, image_ids=None) -> list[Detection]:
    """Eval-mode inference graph over CHW images; flat detection list tagged by image id."""
    images = list(images)
    ids = list(range(len(images))) if image_ids is None else list(image_ids)
    was_training = model.training
    model.eval()
    dets: list[Detection] = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                x = Tensor(np.stack(images[start:start + batch_size]).astype(model_dtype(model)))
                out = model.forward_infer(x)
                for per_image in decode_batch(out, k_max, score_thresh, ids[start:start + batch_size]):
                    dets.extend(per_image)
    finally:
        model.train(was_training)
    return dets


def model_dtype(model: DrebNet):
    return model.det_stem.conv.weight.dtype


def ground_truth(samples) -> dict:
    return {s.image_id: list(s.boxes) for s in samples}


def training_set_map(model: DrebNet, samples, iou_thresh: float = 0.5) -> float:
    dets = predict(model, [s.blurred for s in samples], image_ids=[s.image_id for s in samples],
                   score_thresh=0.05)
    return mean_ap(per_class_ap(dets, ground_truth(samples), iou_thresh))


def restoration_psnr_gain(model: DrebNet, samples) -> float:
    """Mean over images of PSNR(restored, sharp) - PSNR(blurred, sharp), eval mode."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            x = Tensor(np.stack([s.blurred for s in samples]).astype(model_dtype(model)))
            restored = model.restore(x).data
    finally:
        model.train(was_training)
    gains = [psnr(r, s.sharp) - psnr(s.blurred, s.sharp) for r, s in zip(restored, samples)]
    return float(np.mean(gains))


def metric_report(dets, gts, iou_list=(0.5,)) -> dict:
    """Per-class AP_50/AR_50, mAP_s/m/l and mAP_50/mAR_50, plus mAP at any further IoU thresholds."""
    report: dict[str, float] = {}
    ap = per_class_ap(dets, gts, 0.5)
    ar = per_class_ar(dets, gts, 0.5)
    for c in gt_classes(gts):
        report[f"AP_50_c{c}"] = ap[c]
    for c in gt_classes(gts):
        report[f"AR_50_c{c}"] = ar[c]
    s, m, l = size_stratified_map(dets, gts, 0.5)
    report.update(mAP_s=s, mAP_m=m, mAP_l=l, mAP_50=mean_ap(ap), mAR_50=mean_ap(ar))
    for t in iou_list:
        if abs(t - 0.5) > 1e-12:
            report[f"mAP_{round(t * 100)}"] = mean_ap(per_class_ap(dets, gts, t))
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(report))
        w.writerow(["nan" if math.isnan(v) else f"{v:.6f}" for v in report.values()])


def write_detections(path, dets) -> None:
    """One line per detection: image_id class_id score x_min y_min x_max y_max."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(f"{d.image_id} {d.class_id} {d.score!r} " + " ".join(repr(float(v)) for v in d.box) + "\n")


def read_detections(path) -> list[Detection]:
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            dets.append(Detection(int(parts[1]), tuple(float(v) for v in parts[3:]), float(parts[2]),
                                  int(parts[0])))
    return dets


def evaluate(ckpt_path, index_path, image_dir, iou_list=(0.5,), out_dir=".", allow_train: bool = False) -> dict:
    """Run the inference checkpoint over an annotated set; write detections, report and curves."""
    from .checkpoint import load_checkpoint
    from .data import load_dataset

    ck = load_checkpoint(ckpt_path)
    if ck.mode != "infer" and not allow_train:
        raise ValueError(f"{ckpt_path} is a {ck.mode}-mode checkpoint; pass --allow-train to evaluate it")
    ds = load_dataset(index_path, image_dir)
    images = [r.image for r in ds.records]
    dets = predict(ck.model, images, k_max=ck.config.k_max, score_thresh=ck.config.score_thresh)
    gts = {i: list(r.boxes) for i, r in enumerate(ds.records)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.txt", dets)
    report = metric_report(dets, gts, iou_list)
    write_report(report, out / "report.csv")
    export_curves(dets, gts, iou_list, out / "curves")
    return report
