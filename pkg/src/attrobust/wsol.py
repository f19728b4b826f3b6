"""Weakly supervised localization and segmentation from attribution heatmaps.

Pipeline: attribution map -> grayscale heatmap (channel reduction, min-max
normalization, 3x3 mean filter) -> threshold at a fraction of the max ->
tightest box around the largest connected component.  Metrics follow the
standard protocol: a localization counts when IoU with the ground-truth box
reaches 0.5.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

log = logging.getLogger(__name__)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, inclusive on both ends."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def to_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class LocalizationResult:
    predicted_box: BoundingBox
    gt_box: BoundingBox
    iou: float
    prediction_correct: bool


def heatmap_postprocess(scores, channel_reduce="mean") -> np.ndarray:
    """Attribution scores -> grayscale heatmap in [0, 1].

    3-D (C, H, W) input is reduced over channels first; then min-max
    normalization and a 3x3 mean filter with edge-replicate padding.  A
    constant map normalizes to all zeros (with a warning).
    """
    arr = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if arr.ndim == 3:
        if channel_reduce == "mean":
            arr = arr.mean(axis=0)
        elif channel_reduce == "abs_mean":
            arr = np.abs(arr).mean(axis=0)
        else:
            raise ValueError(f"unknown channel_reduce {channel_reduce!r}")
    if arr.ndim != 2:
        raise ValueError(f"expected a spatial map, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        log.warning("constant attribution map; heatmap is all zeros")
        norm = np.zeros_like(arr)
    else:
        norm = (arr - lo) / (hi - lo)
    return scipy.ndimage.uniform_filter(norm, size=3, mode="nearest")


def fit_bounding_box(heatmap: np.ndarray, threshold_fraction: float = 0.2) -> BoundingBox:
    """Tightest box over the largest connected component of pixels
    >= threshold_fraction * max(heatmap).  8-connectivity; an empty mask
    falls back to the full image (with a warning)."""
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    full = BoundingBox(0, 0, hm.shape[1] - 1, hm.shape[0] - 1)
    mask = hm >= threshold_fraction * hm.max()
    if not mask.any():
        log.warning("empty threshold mask; falling back to the full-image box")
        return full
    labels, count = scipy.ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count > 1:
        sizes = scipy.ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with the pixel-inclusive width convention."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / float(a.area() + b.area() - inter)


def mask_iou(est: np.ndarray, gt: np.ndarray) -> float:
    est = np.asarray(est, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if est.shape != gt.shape:
        raise ValueError("mask shapes differ")
    union = np.logical_or(est, gt).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(est, gt).sum() / union)


def wsol_metrics(results) -> dict:
    """Aggregate localization metrics.

    gt_known_loc: IoU >= 0.5; top1_loc: correct prediction AND IoU >= 0.5;
    top1_acc: correct prediction."""
    results = list(results)
    if not results:
        raise ValueError("empty result list")
    n = len(results)
    hit = np.array([r.iou >= 0.5 for r in results])
    correct = np.array([r.prediction_correct for r in results])
    return {
        "gt_known_loc": float(hit.mean()),
        "top1_loc": float((hit & correct).mean()),
        "top1_acc": float(correct.mean()),
        "n": n,
    }


def top1_seg(items) -> float:
    """Fraction of (est_mask, gt_mask, prediction_correct) triples with a
    correct prediction and mask IoU >= 0.5."""
    items = list(items)
    if not items:
        raise ValueError("empty result list")
    ok = [bool(correct) and mask_iou(est, gt) >= 0.5 for est, gt, correct in items]
    return float(np.mean(ok))


def localize(heatmap_scores, gt_box: BoundingBox, prediction_correct: bool,
             threshold_fraction: float = 0.2, channel_reduce="mean") -> LocalizationResult:
    """Run the full heatmap -> box path for one image and score it."""
    hm = heatmap_postprocess(heatmap_scores, channel_reduce=channel_reduce)
    box = fit_bounding_box(hm, threshold_fraction)
    return LocalizationResult(box, gt_box, iou(box, gt_box), bool(prediction_correct))


def load_manifest(path):
    """Dataset manifest: CSV with image,label,x_min,y_min,x_max,y_max[,mask]."""
    rows = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "image": rec["image"],
                "label": int(rec["label"]),
                "box": BoundingBox(int(rec["x_min"]), int(rec["y_min"]),
                                   int(rec["x_max"]), int(rec["y_max"])),
                "mask": rec.get("mask") or None,
            })
    return rows


def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)


def save_overlay(image_chw: np.ndarray, heatmap: np.ndarray, predicted: BoundingBox,
                 gt: BoundingBox, path):
    """Export the image blended with its heatmap plus predicted (green) and
    ground-truth (red) boxes."""
    from PIL import Image, ImageDraw

    img = np.asarray(image_chw, dtype=np.float64)
    if img.ndim == 3:
        img = np.transpose(img, (1, 2, 0))
    img = np.clip(img, 0, 1)
    hm = np.clip(np.asarray(heatmap, dtype=np.float64), 0, 1)[..., None]
    blend = 0.55 * img + 0.45 * np.concatenate([hm, hm, np.zeros_like(hm)], axis=2)
    pil = Image.fromarray((np.clip(blend, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    draw.rectangle([gt.x_min, gt.y_min, gt.x_max, gt.y_max], outline=(255, 40, 40))
    draw.rectangle([predicted.x_min, predicted.y_min, predicted.x_max, predicted.y_max],
                   outline=(40, 255, 40))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
