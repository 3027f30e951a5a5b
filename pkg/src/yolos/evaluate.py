"""COCO-style average precision: greedy per-score matching, 101-point interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy, pairwise_iou
from .matching import GroundTruthObject

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ImagePredictions:
    boxes: np.ndarray  # (n, 4) normalized cx, cy, w, h
    labels: np.ndarray  # (n,) foreground class ids
    scores: np.ndarray  # (n,)
    image_id: int = 0

    def __len__(self):
        return len(self.scores)


@dataclass
class ApReport:
    ap_per_iou: dict[float, Optional[float]]
    mean_ap: Optional[float]
    ap50: Optional[float]
    per_class: dict[int, Optional[float]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "ap_per_iou": {f"{k:.2f}": v for k, v in self.ap_per_iou.items()},
            "mean_ap": self.mean_ap,
            "ap50": self.ap50,
            "per_class": {str(k): v for k, v in self.per_class.items()},
        }


def predictions_from_logits(class_logits: np.ndarray, boxes: np.ndarray, image_id: int = 0,
                            score_threshold: float = 0.0) -> ImagePredictions:
    """Keep tokens whose argmax is a foreground class and whose score exceeds the threshold.

    The score is the largest foreground probability.
    """
    z = class_logits - class_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    fg = p[:, :-1]
    labels = fg.argmax(axis=-1)
    scores = fg.max(axis=-1)
    keep = (p.argmax(axis=-1) != p.shape[1] - 1) & (scores > score_threshold)
    return ImagePredictions(np.asarray(boxes)[keep], labels[keep], scores[keep], image_id)


def _class_ap(preds: Sequence[ImagePredictions], gts: Sequence[Sequence[GroundTruthObject]], cls: int,
              thr: float) -> Optional[float]:
    gt_boxes = []
    npos = 0
    for objs in gts:
        b = np.array([o.box for o in objs if o.class_id == cls], dtype=float).reshape(-1, 4)
        gt_boxes.append(cxcywh_to_xyxy(b))
        npos += len(b)
    if npos == 0:
        return None
    entries = []  # (-score, image index, prediction index)
    for i, p in enumerate(preds):
        for j in np.nonzero(np.asarray(p.labels) == cls)[0]:
            entries.append((-float(p.scores[j]), i, int(j)))
    if not entries:
        return 0.0
    entries.sort()
    ious = {}
    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(entries))
    for k, (_, i, j) in enumerate(entries):
        g = gt_boxes[i]
        if not len(g):
            continue
        if i not in ious:
            mask = np.asarray(preds[i].labels) == cls
            idx = np.nonzero(mask)[0]
            table, _ = pairwise_iou(cxcywh_to_xyxy(np.asarray(preds[i].boxes)[idx]), g)
            ious[i] = dict(zip(idx.tolist(), table))
        row = np.where(matched[i], -1.0, ious[i][j])
        best = int(np.argmax(row))
        if row[best] >= thr:
            matched[i][best] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    where = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(where < len(envelope), envelope[np.minimum(where, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_ap(preds: Sequence[ImagePredictions], gts: Sequence[Sequence[GroundTruthObject]],
                iou_thresholds: Sequence[float] = COCO_THRESHOLDS, num_classes: Optional[int] = None) -> ApReport:
    """Per-class AP at each IoU threshold, averaged over classes, then thresholds.

    Classes without ground truth are left out of the mean; with no ground
    truth at all every AP is ``None``.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} images")
    classes = sorted({o.class_id for objs in gts for o in objs})
    if num_classes is not None:
        classes = [c for c in range(num_classes) if c in set(classes)]
    per_iou: dict[float, Optional[float]] = {}
    per_class_acc: dict[int, list[float]] = {c: [] for c in classes}
    for thr in iou_thresholds:
        aps = []
        for c in classes:
            ap = _class_ap(preds, gts, c, thr)
            if ap is not None:
                aps.append(ap)
                per_class_acc[c].append(ap)
        per_iou[float(thr)] = float(np.mean(aps)) if aps else None
    defined = [v for v in per_iou.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else None
    ap50 = next((v for k, v in per_iou.items() if abs(k - 0.5) < 1e-9), None)
    per_class = {c: (float(np.mean(v)) if v else None) for c, v in per_class_acc.items()}
    return ApReport(per_iou, mean_ap, ap50, per_class)
