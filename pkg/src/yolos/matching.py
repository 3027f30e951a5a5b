"""Bipartite label assignment and the set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .boxes import cxcywh_to_xyxy, giou_tensor, pairwise_giou


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    box: tuple[float, float, float, float]  # normalized cx, cy, w, h

    def __post_init__(self):
        cx, cy, w, h = self.box
        if not (w > 0 and h > 0):
            raise ValueError(f"box extents must be positive, got {self.box}")
        eps = 1e-9
        if cx - w / 2 < -eps or cy - h / 2 < -eps or cx + w / 2 > 1 + eps or cy + h / 2 > 1 + eps:
            raise ValueError(f"box {self.box} leaves the unit square")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    noobj: float = 0.1


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]  # (prediction index, ground-truth index), sorted by prediction
    total_cost: float
    unmatched: list[int] = field(default_factory=list)


@dataclass
class LossReport:
    total: float
    class_term: float
    l1_term: float
    giou_term: float
    weights: LossWeights
    tensor: ad.Tensor | None = None

    def as_dict(self) -> dict:
        return {"total": self.total, "cls": self.class_term, "l1": self.l1_term, "giou": self.giou_term}


# Hungarian ------------------------------------------------------------------------

def _solve(cost: np.ndarray):
    """Shortest augmenting path assignment for n <= m.

    Returns (row -> col array, row potentials u, column potentials v) with
    reduced costs ``cost - u[:, None] - v[None, :]`` non-negative and zero on
    the assignment.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols, u[1:], v[1:]


def _lexicographic(cost: np.ndarray) -> np.ndarray:
    """Optimal row -> col assignment (n <= m) that is lexicographically smallest among optima."""
    n, m = cost.shape
    cols, u, v = _solve(cost)
    best = float(cost[np.arange(n), cols].sum())
    scale = max(1.0, float(np.max(np.abs(cost))) if cost.size else 1.0)
    tol = 1e-9 * scale * max(1, n)
    reduced = cost - u[:, None] - v[None, :]
    fixed_cost = 0.0
    taken: set[int] = set()
    for i in range(n):
        for j in range(cols[i]):
            if j in taken or abs(reduced[i, j]) > tol:
                continue
            rest_rows = np.arange(i + 1, n)
            rest_cols = np.array([c for c in range(m) if c != j and c not in taken], dtype=int)
            sub = cost[np.ix_(rest_rows, rest_cols)]
            if len(rest_rows):
                sub_cols, _, _ = _solve(sub)
                rest = float(sub[np.arange(len(rest_rows)), sub_cols].sum())
            else:
                sub_cols, rest = np.zeros(0, dtype=int), 0.0
            if abs(fixed_cost + cost[i, j] + rest - best) <= tol:
                cols[i] = j
                cols[i + 1:] = rest_cols[sub_cols]
                break
        taken.add(int(cols[i]))
        fixed_cost += cost[i, cols[i]]
    return cols


def hungarian(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment over min(n, m) pairs.

    Ties are broken toward the lexicographically smallest assignment vector,
    indexed by the smaller side (rows when n <= m, columns otherwise).
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    if np.isnan(c).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains infinite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return MatchResult([], 0.0, list(range(n)))
    if n <= m:
        cols = _lexicographic(c)
        pairs = [(i, int(cols[i])) for i in range(n)]
    else:
        rows = _lexicographic(c.T)
        pairs = sorted((int(rows[j]), j) for j in range(m))
    total = float(sum(c[i, j] for i, j in pairs))
    used = {i for i, _ in pairs}
    return MatchResult(pairs, total, [i for i in range(n) if i not in used])


# cost and loss --------------------------------------------------------------------

def _probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _gt_arrays(gts: Sequence[GroundTruthObject]):
    classes = np.array([g.class_id for g in gts], dtype=int)
    boxes = np.array([g.box for g in gts], dtype=float).reshape(-1, 4)
    return classes, boxes


def match_cost(class_logits, boxes, gts: Sequence[GroundTruthObject], weights: LossWeights = LossWeights()):
    """Cost matrix (tokens, objects) of class probability, L1 and (1 - GIoU) terms."""
    logits = np.asarray(getattr(class_logits, "data", class_logits), dtype=float)
    pred = np.asarray(getattr(boxes, "data", boxes), dtype=float)
    t = logits.shape[0]
    if len(gts) > t:
        raise ValueError(f"{len(gts)} ground-truth objects exceed {t} detection tokens")
    classes, gt_boxes = _gt_arrays(gts)
    if not len(gts):
        return np.zeros((t, 0))
    prob = _probs(logits)[:, classes]
    l1 = np.abs(pred[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    g = pairwise_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt_boxes))
    return weights.cls * -prob + weights.l1 * l1 + weights.giou * (1.0 - g)


def match(class_logits, boxes, gts, weights: LossWeights = LossWeights()) -> MatchResult:
    return hungarian(match_cost(class_logits, boxes, gts, weights))


def match_batch(output, gts_batch, weights: LossWeights = LossWeights()) -> list[MatchResult]:
    logits = output.class_logits.data
    boxes = output.boxes.data
    if logits.ndim == 2:
        return [match(logits, boxes, gts_batch[0], weights)]
    return [match(logits[b], boxes[b], gts_batch[b], weights) for b in range(logits.shape[0])]


def batch_set_loss(class_logits: ad.Tensor, boxes: ad.Tensor, gts_batch, matches: Sequence[MatchResult],
                   weights: LossWeights = LossWeights()) -> LossReport:
    """Mean over images of the per-image set loss.

    Class term: cross-entropy over every token, unmatched tokens labelled
    "no object" (last class) and down-weighted by ``weights.noobj``, averaged
    over tokens. Box terms: L1 and 1 - GIoU over matched pairs, divided by
    the image's object count. The matching is a constant of the forward pass.
    """
    b, t, c = class_logits.shape
    if len(gts_batch) != b or len(matches) != b:
        raise ValueError(f"batch of {b} predictions but {len(gts_batch)} targets / {len(matches)} matches")
    targets = np.full((b, t), c - 1, dtype=int)
    rows, gt_rows, row_w = [], [], []
    for i, (gts, m) in enumerate(zip(gts_batch, matches)):
        classes, gt_boxes = _gt_arrays(gts)
        if len(m.assignment) != len(gts):
            raise ValueError(f"image {i}: {len(m.assignment)} matched pairs for {len(gts)} objects")
        for pred_idx, gt_idx in m.assignment:
            if classes[gt_idx] >= c - 1:
                raise ValueError(f"image {i}: class id {classes[gt_idx]} outside {c - 1} foreground classes")
            targets[i, pred_idx] = classes[gt_idx]
            rows.append(i * t + pred_idx)
            gt_rows.append(gt_boxes[gt_idx])
            row_w.append(1.0 / (b * len(gts)))
    class_weights = np.ones(c)
    class_weights[-1] = weights.noobj
    cls_term = ad.cross_entropy(ad.reshape(class_logits, (b * t, c)), targets.reshape(-1), class_weights)
    if rows:
        picked = ad.take_rows(ad.reshape(boxes, (b * t, 4)), rows)
        gt_arr = np.array(gt_rows)
        w = ad.Tensor(np.array(row_w))
        l1_rows = ad.sum(ad.absolute(ad.sub(picked, ad.Tensor(gt_arr))), axis=1)
        l1_term = ad.sum(ad.mul(l1_rows, w))
        g = giou_tensor(picked, cxcywh_to_xyxy(gt_arr))
        giou_term = ad.sum(ad.mul(ad.sub(ad.Tensor(np.ones(len(rows))), g), w))
    else:
        l1_term = ad.Tensor(0.0)
        giou_term = ad.Tensor(0.0)
    total = ad.add(ad.add(ad.scale(cls_term, weights.cls), ad.scale(l1_term, weights.l1)),
                   ad.scale(giou_term, weights.giou))
    return LossReport(total.item(), cls_term.item(), l1_term.item(), giou_term.item(), weights, total)


def set_loss(output, gts: Sequence[GroundTruthObject], match_result: MatchResult,
             weights: LossWeights = LossWeights()) -> LossReport:
    """Set loss for a single image's predictions."""
    logits, boxes = output.class_logits, output.boxes
    if logits.ndim == 2:
        logits = ad.reshape(logits, (1, *logits.shape))
        boxes = ad.reshape(boxes, (1, *boxes.shape))
    return batch_set_loss(logits, boxes, [gts], [match_result], weights)

