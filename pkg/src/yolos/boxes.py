"""Box conversions, IoU and generalized IoU (numpy and differentiable forms)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def cxcywh_to_xyxy(boxes):
    b = np.asarray(boxes, dtype=float)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=float)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (_area(a) + _area(b) - inter)


def giou(a, b) -> float:
    """Generalized IoU of two corner-form boxes (x1, y1, x2, y2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"degenerate box {box.tolist()}: extents must be positive")
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (enclose - union) / enclose


def pairwise_iou(a: np.ndarray, b: np.ndarray):
    """IoU and union for every pair of corner boxes: (n, 4) x (m, 4) -> (n, m) each."""
    a = np.asarray(a, dtype=float)[:, None, :]
    b = np.asarray(b, dtype=float)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out, union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iou_, union = pairwise_iou(a, b)
    a3, b3 = a[:, None, :], b[None, :, :]
    enclose = (np.maximum(a3[..., 2], b3[..., 2]) - np.minimum(a3[..., 0], b3[..., 0])) * (
        np.maximum(a3[..., 3], b3[..., 3]) - np.minimum(a3[..., 1], b3[..., 1]))
    return iou_ - (enclose - union) / enclose


def giou_tensor(pred_cxcywh: ad.Tensor, target_xyxy: np.ndarray) -> ad.Tensor:
    """Row-wise GIoU between predicted center-form boxes (M, 4) and fixed corner-form targets (M, 4)."""
    cx = ad.slice_axis(pred_cxcywh, 1, 0, 1)
    cy = ad.slice_axis(pred_cxcywh, 1, 1, 2)
    hw = ad.scale(ad.slice_axis(pred_cxcywh, 1, 2, 3), 0.5)
    hh = ad.scale(ad.slice_axis(pred_cxcywh, 1, 3, 4), 0.5)
    px1, px2 = ad.sub(cx, hw), ad.add(cx, hw)
    py1, py2 = ad.sub(cy, hh), ad.add(cy, hh)
    t = np.asarray(target_xyxy, dtype=float)
    tx1, ty1, tx2, ty2 = (ad.Tensor(t[:, i:i + 1]) for i in range(4))
    iw = ad.relu(ad.sub(ad.minimum(px2, tx2), ad.maximum(px1, tx1)))
    ih = ad.relu(ad.sub(ad.minimum(py2, ty2), ad.maximum(py1, ty1)))
    inter = ad.mul(iw, ih)
    pa = ad.mul(ad.sub(px2, px1), ad.sub(py2, py1))
    ta = ad.Tensor((t[:, 2:3] - t[:, 0:1]) * (t[:, 3:4] - t[:, 1:2]))
    union = ad.sub(ad.add(pa, ta), inter)
    ew = ad.sub(ad.maximum(px2, tx2), ad.minimum(px1, tx1))
    eh = ad.sub(ad.maximum(py2, ty2), ad.minimum(py1, ty1))
    enclose = ad.mul(ew, eh)
    out = ad.sub(ad.div(inter, union), ad.div(ad.sub(enclose, union), enclose))
    return ad.reshape(out, (out.shape[0],))
