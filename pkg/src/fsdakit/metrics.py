"""IoU, all-points average precision, mAP@50, mAP@50:95 and recall."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .dataset import Annotation, BBox, DetectionDataset

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    bbox: BBox
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


GroundTruthIndex = Mapping[str, Sequence[Annotation]]


def gt_from_dataset(dataset: DetectionDataset) -> dict[str, tuple[Annotation, ...]]:
    return {img.image_id: img.annotations for img in dataset.images}


def _rank(dets: Sequence[Detection]) -> list[Detection]:
    # stable: equal confidences keep input order
    return sorted(dets, key=lambda d: -d.confidence)


def match_ranked(ranked: Sequence[Detection], gt: GroundTruthIndex, class_id: int, iou_thresh: float):
    """True-positive flag per ranked detection, plus the matched gt count.

    Greedy in confidence order; each detection takes the still-unmatched
    ground truth of its image with the highest IoU, if that IoU reaches the
    threshold.
    """
    tp = np.zeros(len(ranked), dtype=bool)
    by_image = defaultdict(list)
    for pos, d in enumerate(ranked):
        by_image[d.image_id].append(pos)
    for image_id, positions in by_image.items():
        gts = [a.bbox.as_tuple() for a in gt.get(image_id, ()) if a.class_id == class_id]
        if not gts:
            continue
        boxes = np.array([ranked[p].bbox.as_tuple() for p in positions])
        match = kernels.greedy_match(iou_matrix(boxes, np.array(gts)), iou_thresh)
        tp[np.asarray(positions)[match >= 0]] = True
    return tp


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _n_gt(gt: GroundTruthIndex, class_id: int) -> int:
    return sum(1 for anns in gt.values() for a in anns if a.class_id == class_id)


def average_precision(
    dets: Iterable[Detection], gt: GroundTruthIndex, class_id: int, iou_thresh: float = 0.5
) -> float | None:
    """AP of one class; ``None`` when the class has neither detections nor ground truth."""
    ranked = _rank([d for d in dets if d.class_id == class_id])
    n_gt = _n_gt(gt, class_id)
    if n_gt == 0:
        return None if not ranked else 0.0
    return ap_from_flags(match_ranked(ranked, gt, class_id, iou_thresh), n_gt)


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def map_suite(
    dets: Sequence[Detection],
    gt: GroundTruthIndex,
    num_classes: int,
    class_names: Sequence[str] | None = None,
) -> dict:
    dets = list(dets)
    names = list(class_names) if class_names else [str(c) for c in range(num_classes)]
    ap50: list[float | None] = []
    ap5095: list[float | None] = []
    matched = 0
    total_gt = 0
    for cls in range(num_classes):
        ranked = _rank([d for d in dets if d.class_id == cls])
        n_gt = _n_gt(gt, cls)
        total_gt += n_gt
        if n_gt == 0:
            ap50.append(None if not ranked else 0.0)
            ap5095.append(None if not ranked else 0.0)
            continue
        per_t = []
        for t in COCO_THRESHOLDS:
            flags = match_ranked(ranked, gt, cls, t)
            per_t.append(ap_from_flags(flags, n_gt))
            if t == 0.5:
                matched += int(flags.sum())
        ap50.append(per_t[0])
        ap5095.append(float(np.mean(per_t)))
    report = {
        "mAP@50": _mean(ap50),
        "mAP@50:95": _mean(ap5095),
        "recall": matched / total_gt if total_gt else 0.0,
        "per_class": {
            names[c]: {"AP@50": ap50[c], "AP@50:95": ap5095[c]} for c in range(num_classes)
        },
    }
    row = {"mAP@50": round(100 * report["mAP@50"], 1)}
    row.update({names[c]: (None if ap50[c] is None else round(100 * ap50[c], 1)) for c in range(num_classes)})
    report["table_row_percent"] = row
    return report


def load_detections(path: str | Path) -> list[Detection]:
    """Detections from JSON lines ``{image_id, class_id, bbox: [x0, y0, x1, y1], confidence}``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"detections file not found: {path}")
    out = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(
                Detection(
                    str(rec["image_id"]),
                    int(rec["class_id"]),
                    BBox(*map(float, rec["bbox"])),
                    float(rec["confidence"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{line_no}: bad detection record ({exc})") from None
    return out
