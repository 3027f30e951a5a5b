"""Inspection of what the [DET] tokens learn: pair correlations, box scatter, category statistics,
and [DET]-token attention maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import LabeledImage, collate
from .imageio import write_ppm
from .model import Detector


@dataclass(frozen=True)
class TokenPairSample:
    cos_sim: float
    center_dist: float
    cls_feat_sim: float


@dataclass
class TokenOutputs:
    """Per-image raw outputs needed by the statistics (tokens along the first axis)."""

    class_logits: np.ndarray
    boxes: np.ndarray
    embeddings: np.ndarray

    def foreground(self) -> np.ndarray:
        return np.nonzero(self.class_logits.argmax(axis=-1) != self.class_logits.shape[-1] - 1)[0]


def pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Population Pearson correlation; ``None`` when either variable has zero variance."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("pearson needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).mean())
    sy = np.sqrt((dy * dy).mean())
    if sx <= 1e-15 * max(1.0, np.abs(x).max()) or sy <= 1e-15 * max(1.0, np.abs(y).max()):
        return None
    return float(np.clip((dx * dy).mean() / (sx * sy), -1.0, 1.0))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pair_samples(out: TokenOutputs, features: Optional[np.ndarray] = None) -> list[TokenPairSample]:
    """All pairs of foreground predictions within one image.

    ``features`` are the classifier outputs compared by ``cls_feat_sim``;
    they default to the class logits.
    """
    feats = out.class_logits if features is None else features
    keep = out.foreground()
    samples = []
    for a in range(len(keep)):
        for b in range(a + 1, len(keep)):
            i, j = keep[a], keep[b]
            d = float(np.linalg.norm(out.boxes[i, :2] - out.boxes[j, :2]))
            samples.append(TokenPairSample(_cos(out.embeddings[i], out.embeddings[j]), d,
                                           _cos(feats[i], feats[j])))
    return samples


def _mean_rho(per_image: Iterable[list[TokenPairSample]], field: str) -> Optional[float]:
    rhos = []
    for samples in per_image:
        if len(samples) < 2:
            continue
        rho = pearson([s.cos_sim for s in samples], [getattr(s, field) for s in samples])
        if rho is not None:
            rhos.append(rho)
    return float(np.mean(rhos)) if rhos else None


def geometry_rho(outputs: Sequence[TokenOutputs]) -> Optional[float]:
    """Image-averaged correlation of embedding cosine similarity with predicted-center distance."""
    return _mean_rho((pair_samples(o) for o in outputs), "center_dist")


def class_feature_rho(outputs: Sequence[TokenOutputs], features: Optional[Sequence[np.ndarray]] = None
                      ) -> Optional[float]:
    """Image-averaged correlation of embedding cosine similarity with classifier-output cosine similarity."""
    feats = features if features is not None else [None] * len(outputs)
    return _mean_rho((pair_samples(o, f) for o, f in zip(outputs, feats)), "cls_feat_sim")


def collect_outputs(detector: Detector, images: Sequence[LabeledImage], batch_size: int = 32,
                    zero_pe: bool = False) -> list[TokenOutputs]:
    outs = []
    for start in range(0, len(images), batch_size):
        pixels, _ = collate(images[start:start + batch_size], detector.config.patch_size)
        with ad.no_grad():
            o = detector(pixels, zero_pe=zero_pe)
        for b in range(pixels.shape[0]):
            outs.append(TokenOutputs(o.class_logits.data[b], o.boxes.data[b], o.det_embeddings.data[b]))
    return outs


def geometry_correlation(detector: Detector, images: Sequence[LabeledImage]) -> Optional[float]:
    return geometry_rho(collect_outputs(detector, images))


def class_feature_correlation(detector: Detector, images: Sequence[LabeledImage]) -> Optional[float]:
    return class_feature_rho(collect_outputs(detector, images))


# box scatter ----------------------------------------------------------------------------

SIZE_NAMES = ("small", "medium", "large")


@dataclass
class ScatterRecord:
    token: int
    centers: np.ndarray  # (n, 2)
    size_class: np.ndarray  # (n,) 0 small, 1 medium, 2 large

    def as_dict(self) -> dict:
        return {"token": self.token, "centers": self.centers.tolist(),
                "size_class": [SIZE_NAMES[s] for s in self.size_class]}


def scatter_from_outputs(outputs: Sequence[TokenOutputs], foreground_only: bool = False) -> list[ScatterRecord]:
    """Per-token predicted centers; sizes bucketed by terciles of all collected box areas."""
    if not outputs:
        return []
    t = outputs[0].boxes.shape[0]
    centers: list[list[np.ndarray]] = [[] for _ in range(t)]
    areas: list[list[float]] = [[] for _ in range(t)]
    for o in outputs:
        tokens = o.foreground() if foreground_only else range(t)
        for i in tokens:
            centers[i].append(o.boxes[i, :2])
            areas[i].append(float(o.boxes[i, 2] * o.boxes[i, 3]))
    pooled = np.concatenate([np.asarray(a) for a in areas if a]) if any(areas) else np.zeros(0)
    cuts = np.quantile(pooled, [1 / 3, 2 / 3]) if len(pooled) else np.zeros(2)
    records = []
    for i in range(t):
        a = np.asarray(areas[i])
        records.append(ScatterRecord(i, np.asarray(centers[i]).reshape(-1, 2),
                                     np.searchsorted(cuts, a, side="right").astype(int)))
    return records


def box_scatter(detector: Detector, images: Sequence[LabeledImage], zero_pe: bool = False,
                foreground_only: bool = False) -> list[ScatterRecord]:
    return scatter_from_outputs(collect_outputs(detector, images, zero_pe=zero_pe), foreground_only)


_SIZE_COLORS = np.array([[0.85, 0.1, 0.1], [0.1, 0.6, 0.1], [0.1, 0.2, 0.85]])


def render_scatter(record: ScatterRecord, size: int = 96) -> np.ndarray:
    img = np.ones((size, size, 3))
    img[0, :] = img[-1, :] = img[:, 0] = img[:, -1] = 0.6
    for (cx, cy), s in zip(record.centers, record.size_class):
        x = int(np.clip(cx * size, 1, size - 2))
        y = int(np.clip(cy * size, 1, size - 2))
        img[y - 1:y + 2, x - 1:x + 2] = _SIZE_COLORS[s]
    return img


def write_scatter(records: Sequence[ScatterRecord], out_dir, count: int = 10, size: int = 96) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in records[:count]:
        p = out_dir / f"scatter_token{r.token}.ppm"
        write_ppm(p, render_scatter(r, size))
        paths.append(p)
    return paths


# category statistics ---------------------------------------------------------------------

@dataclass
class CategoryStats:
    gt_histogram: np.ndarray  # (K,)
    token_histograms: np.ndarray  # (T, K) counts of foreground predictions
    cross_token_std: np.ndarray  # (K,) std over tokens of each token's category share

    def as_dict(self) -> dict:
        return {"gt_histogram": self.gt_histogram.tolist(),
                "token_histograms": self.token_histograms.tolist(),
                "cross_token_std": self.cross_token_std.tolist(),
                "mean_cross_token_std": float(self.cross_token_std.mean())}


def _shares_std(hist: np.ndarray) -> np.ndarray:
    totals = hist.sum(axis=1)
    active = totals > 0
    if not active.any():
        return np.zeros(hist.shape[1])
    shares = hist[active] / totals[active, None]
    return shares.std(axis=0)


def category_stats_from_outputs(outputs: Sequence[TokenOutputs], gts: Sequence[Sequence], num_classes: int
                                ) -> CategoryStats:
    gt_hist = np.zeros(num_classes, dtype=int)
    for objs in gts:
        for o in objs:
            gt_hist[o.class_id] += 1
    t = outputs[0].class_logits.shape[0] if outputs else 0
    hist = np.zeros((t, num_classes), dtype=int)
    for o in outputs:
        labels = o.class_logits.argmax(axis=-1)
        for i in o.foreground():
            hist[i, labels[i]] += 1
    return CategoryStats(gt_hist, hist, _shares_std(hist))


def category_stats(detector: Detector, images: Sequence[LabeledImage]) -> CategoryStats:
    outs = collect_outputs(detector, images)
    return category_stats_from_outputs(outs, [im.objects for im in images], detector.config.num_classes)


def category_null_std(stats: CategoryStats, rng: np.random.Generator, rounds: int = 200) -> np.ndarray:
    """Mean cross-token std per round after shuffling predicted labels across tokens."""
    hist = stats.token_histograms
    tokens = np.repeat(np.arange(hist.shape[0]), hist.sum(axis=1))
    labels = np.concatenate([np.repeat(np.arange(hist.shape[1]), row) for row in hist]) if hist.size else np.zeros(0)
    out = np.zeros(rounds)
    for r in range(rounds):
        shuffled = rng.permutation(labels)
        h = np.zeros_like(hist)
        np.add.at(h, (tokens, shuffled.astype(int)), 1)
        out[r] = _shares_std(h).mean()
    return out


# attention maps -----------------------------------------------------------------------------

@dataclass
class AttentionMaps:
    layer: int
    raw: np.ndarray  # (T, heads, rows, cols) attention of each [DET] token on the patch tokens
    normalized: np.ndarray  # same, min-max scaled to [0, 1] per map
    row_sums: np.ndarray  # (T, heads) sum over all S columns before restriction


def maps_from_attention(attn: np.ndarray, grid: tuple[int, int], det_tokens: int, layer: int = 0
                        ) -> AttentionMaps:
    """``attn`` is one layer's (heads, S, S) softmax output for a single image."""
    heads, s, _ = attn.shape
    n = grid[0] * grid[1]
    rows = attn[:, s - det_tokens:, :]  # (heads, T, S)
    raw = rows[:, :, :n].transpose(1, 0, 2).reshape(det_tokens, heads, grid[0], grid[1])
    lo = raw.min(axis=(2, 3), keepdims=True)
    hi = raw.max(axis=(2, 3), keepdims=True)
    span = hi - lo
    norm = np.where(span > 0, (raw - lo) / np.where(span > 0, span, 1.0), 0.0)
    return AttentionMaps(layer, raw, norm, rows.sum(axis=-1).T)


def extract_attention(detector: Detector, image: np.ndarray, layer_index: int = -1) -> AttentionMaps:
    depth = detector.config.depth
    idx = layer_index + depth if layer_index < 0 else layer_index
    if not 0 <= idx < depth:
        raise IndexError(f"layer_index {layer_index} out of range for depth {depth}")
    out = detector.predict(np.asarray(image, dtype=float), capture_attention=True)
    return maps_from_attention(out.attention[idx], out.grid, detector.config.det_tokens, idx)


def _upsample(m: np.ndarray, scale: int) -> np.ndarray:
    return np.kron(m, np.ones((scale, scale)))


def render_attention_grid(maps: AttentionMaps, tokens: Sequence[int], scale: int = 4, gap: int = 1) -> np.ndarray:
    """Heads down the rows, tokens across the columns, grey separators."""
    _, heads, gh, gw = maps.normalized.shape
    ch, cw = gh * scale, gw * scale
    h = heads * ch + (heads + 1) * gap
    w = len(tokens) * cw + (len(tokens) + 1) * gap
    img = np.full((h, w, 3), 0.5)
    for r in range(heads):
        for c, t in enumerate(tokens):
            y = gap + r * (ch + gap)
            x = gap + c * (cw + gap)
            img[y:y + ch, x:x + cw] = _upsample(maps.normalized[t, r], scale)[..., None]
    return img


def write_attention(maps: AttentionMaps, out_dir, tokens: Sequence[int], scale: int = 4) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in tokens:
        for h in range(maps.normalized.shape[1]):
            p = out_dir / f"attn_l{maps.layer}_h{h}_t{t}.ppm"
            write_ppm(p, np.repeat(_upsample(maps.normalized[t, h], scale)[..., None], 3, axis=2))
            paths.append(p)
    grid = out_dir / f"attn_l{maps.layer}_grid.ppm"
    write_ppm(grid, render_attention_grid(maps, tokens, scale))
    paths.append(grid)
    return paths
