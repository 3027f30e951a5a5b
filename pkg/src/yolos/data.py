"""Synthetic shapes, COCO-style annotation loading, and the resize/crop augmentations."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import read_image
from .matching import GroundTruthObject

log = logging.getLogger(__name__)

SHAPES = ("square", "disc", "triangle", "diamond", "ring")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) floats in [0, 1]
    objects: list[GroundTruthObject]
    id: int = 0

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def boxes_px(self) -> np.ndarray:
        """Corner-form pixel boxes (n, 4)."""
        h, w = self.size
        out = np.zeros((len(self.objects), 4))
        for i, o in enumerate(self.objects):
            cx, cy, bw, bh = o.box
            out[i] = ((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h)
        return out


def _objects_from_px(boxes_px, classes, h: int, w: int) -> list[GroundTruthObject]:
    out = []
    for (x1, y1, x2, y2), c in zip(boxes_px, classes):
        x1, x2 = max(0.0, x1), min(float(w), x2)
        y1, y2 = max(0.0, y1), min(float(h), y2)
        if x2 <= x1 or y2 <= y1:
            continue
        out.append(GroundTruthObject(int(c), ((x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h)))
    return out


# synthetic shapes -------------------------------------------------------------------

def _mask(kind: str, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size  # pixel centres in the unit square
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disc":
        return (xx - 0.5) ** 2 + (yy - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        return np.abs(xx - 0.5) <= 0.5 * yy
    if kind == "diamond":
        return np.abs(xx - 0.5) + np.abs(yy - 0.5) <= 0.5
    if kind == "ring":
        r2 = (xx - 0.5) ** 2 + (yy - 0.5) ** 2
        return (r2 <= 0.25) & (r2 >= 0.09)
    raise ValueError(f"unknown shape {kind}")


def gen_shapes(seed: int, count: int, canvas=(64, 64), max_objects: int = 3, k_classes: int = 3,
               min_size: int = 8, max_size: int | None = None, channels: int = 3) -> list[LabeledImage]:
    """Random images of non-overlapping filled shapes; class id is the shape type."""
    if not 1 <= k_classes <= len(SHAPES):
        raise ValueError(f"k_classes must be in 1..{len(SHAPES)}, got {k_classes}")
    h, w = canvas
    if min(h, w) < min_size:
        raise ValueError(f"canvas {canvas} is smaller than the minimum shape size {min_size}")
    if max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    max_size = min(h, w) // 2 if max_size is None else min(max_size, h, w)
    max_size = max(max_size, min_size)
    rng = np.random.default_rng(seed)
    images = []
    for idx in range(count):
        pixels = np.empty((h, w, channels))
        pixels[:] = rng.uniform(0.0, 0.25, size=channels)
        n = int(rng.integers(1, max_objects + 1))
        placed: list[tuple[int, int, int, int]] = []
        boxes, classes = [], []
        for _ in range(n):
            for _attempt in range(50):
                s = int(rng.integers(min_size, max_size + 1))
                y0 = int(rng.integers(0, h - s + 1))
                x0 = int(rng.integers(0, w - s + 1))
                if all(x0 >= bx1 + 1 or x0 + s + 1 <= bx0 or y0 >= by1 + 1 or y0 + s + 1 <= by0
                       for bx0, by0, bx1, by1 in placed):
                    break
            else:
                continue
            cls = int(rng.integers(0, k_classes))
            m = _mask(SHAPES[cls], s)
            color = rng.uniform(0.5, 1.0, size=channels)
            region = pixels[y0:y0 + s, x0:x0 + s]
            region[m] = color
            ys, xs = np.nonzero(m)
            bx0, bx1 = x0 + xs.min(), x0 + xs.max() + 1
            by0, by1 = y0 + ys.min(), y0 + ys.max() + 1
            placed.append((x0, y0, x0 + s, y0 + s))
            boxes.append((bx0, by0, bx1, by1))
            classes.append(cls)
        images.append(LabeledImage(pixels, _objects_from_px(boxes, classes, h, w), idx))
    return images


# COCO-style annotations ---------------------------------------------------------------

@dataclass
class AnnotatedImage:
    id: int
    file_name: str
    width: int
    height: int
    objects: list[GroundTruthObject] = field(default_factory=list)


@dataclass
class AnnotationSet:
    images: list[AnnotatedImage]
    categories: dict[int, str]  # dense id -> name
    category_ids: dict[int, int]  # source category id -> dense id
    skipped: int = 0
    root: Path = Path(".")

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def load(self, image: AnnotatedImage) -> LabeledImage:
        pixels = read_image(self.root / image.file_name)
        if pixels.shape[:2] != (image.height, image.width):
            raise ValueError(f"{image.file_name}: size {pixels.shape[:2]} disagrees with annotation "
                             f"{(image.height, image.width)}")
        return LabeledImage(pixels, list(image.objects), image.id)


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise ValueError(f"missing required key '{key}' at {where}")
    return obj[key]


def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    doc = json.loads(path.read_text())
    images_raw = _require(doc, "images", "$")
    anns_raw = _require(doc, "annotations", "$")
    cats_raw = _require(doc, "categories", "$")
    dense: dict[int, int] = {}
    names: dict[int, str] = {}
    for i, c in enumerate(sorted(cats_raw, key=lambda c: _require(c, "id", "$.categories"))):
        cid = int(_require(c, "id", f"$.categories[{i}]"))
        dense[cid] = i
        names[i] = str(_require(c, "name", f"$.categories[{i}]"))
    images: dict[int, AnnotatedImage] = {}
    for i, im in enumerate(images_raw):
        where = f"$.images[{i}]"
        iid = int(_require(im, "id", where))
        images[iid] = AnnotatedImage(iid, str(_require(im, "file_name", where)),
                                     int(_require(im, "width", where)), int(_require(im, "height", where)))
    skipped = 0
    for i, a in enumerate(anns_raw):
        where = f"$.annotations[{i}]"
        iid = int(_require(a, "image_id", where))
        cid = int(_require(a, "category_id", where))
        bbox = _require(a, "bbox", where)
        if iid not in images:
            raise ValueError(f"unknown image_id {iid} at {where}")
        if cid not in dense:
            raise ValueError(f"unknown category_id {cid} at {where}")
        if len(bbox) != 4:
            raise ValueError(f"bbox must have 4 numbers at {where}.bbox")
        x, y, bw, bh = (float(v) for v in bbox)
        im = images[iid]
        objs = _objects_from_px([(x, y, x + bw, y + bh)], [dense[cid]], im.height, im.width) if bw > 0 and bh > 0 else []
        if not objs:
            skipped += 1
            continue
        im.objects.extend(objs)
    if skipped:
        log.warning("%s: skipped %d annotations with non-positive extent", path, skipped)
    return AnnotationSet(list(images.values()), names, dense, skipped, path.parent)


# resize, pad, crop ------------------------------------------------------------------------

def _resample_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) half-pixel-centred linear resampling weights."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.minimum(np.floor(pos).astype(int), max(src - 2, 0))
    frac = pos - lo
    out = np.zeros((dst, src))
    rows = np.arange(dst)
    out[rows, lo] += 1.0 - frac
    if src > 1:
        out[rows, lo + 1] += frac
    return out


def resample(pixels: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of (H, W, C) pixels to ``size`` = (h, w)."""
    h, w = size
    if (h, w) == pixels.shape[:2]:
        return pixels.copy()
    ry = _resample_matrix(pixels.shape[0], h)
    rx = _resample_matrix(pixels.shape[1], w)
    tmp = np.tensordot(ry, pixels, axes=(1, 0))  # (h, W, C)
    return np.einsum("lk,ikc->ilc", rx, tmp, optimize=True)


def pad_to(image: LabeledImage, size) -> LabeledImage:
    """Zero-pad bottom/right to ``size``; boxes keep their pixel positions."""
    h, w = image.size
    H, W = size
    if (H, W) == (h, w):
        return image
    if H < h or W < w:
        raise ValueError(f"cannot pad {h}x{w} down to {H}x{W}")
    out = np.zeros((H, W, image.pixels.shape[2]))
    out[:h, :w] = image.pixels
    objs = [GroundTruthObject(o.class_id, (o.box[0] * w / W, o.box[1] * h / H, o.box[2] * w / W, o.box[3] * h / H))
            for o in image.objects]
    return LabeledImage(out, objs, image.id)


def pad_to_multiple(image: LabeledImage, patch: int) -> LabeledImage:
    h, w = image.size
    return pad_to(image, (-(-h // patch) * patch, -(-w // patch) * patch))


def resize_shortest(image: LabeledImage, short_target: int, long_max: int, patch: int = 1,
                    pad: bool = True) -> LabeledImage:
    """Scale so the short side hits ``short_target`` unless the long side would pass ``long_max``."""
    h, w = image.size
    short, long_ = min(h, w), max(h, w)
    if long_ * short_target > long_max * short:
        new_long, new_short = long_max, (short * long_max) // long_
    else:
        new_short, new_long = short_target, (long_ * short_target) // short
    new_h, new_w = (new_short, new_long) if h <= w else (new_long, new_short)
    new_h, new_w = max(new_h, 1), max(new_w, 1)
    resized = LabeledImage(resample(image.pixels, (new_h, new_w)), list(image.objects), image.id)
    # normalized boxes are unchanged by a full-frame resize
    return pad_to_multiple(resized, patch) if pad else resized


def multi_scale_sample(rng: np.random.Generator, short_range: Sequence[int], patch: int = 16) -> int:
    """Uniform draw over the multiples of ``patch`` inside ``short_range``."""
    lo, hi = short_range
    first = -(-lo // patch) * patch
    choices = np.arange(first, hi + 1, patch)
    if not len(choices):
        raise ValueError(f"no multiple of {patch} in range {short_range}")
    return int(choices[rng.integers(len(choices))])


def crop(image: LabeledImage, top: int, left: int, height: int, width: int) -> LabeledImage:
    h, w = image.size
    if not (0 <= top and 0 <= left and height >= 1 and width >= 1 and top + height <= h and left + width <= w):
        raise ValueError(f"crop window ({top}, {left}, {height}, {width}) outside {h}x{w} image")
    boxes = image.boxes_px() - np.array([left, top, left, top])
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = area >= 1.0
    objs = _objects_from_px(boxes[keep], [o.class_id for o, k in zip(image.objects, keep) if k], height, width)
    return LabeledImage(image.pixels[top:top + height, left:left + width].copy(), objs, image.id)


def random_crop(rng: np.random.Generator, image: LabeledImage, prob: float = 0.5,
                min_frac: float = 0.6) -> LabeledImage:
    """With probability ``prob``, crop a random window spanning ``min_frac``..1 of each side."""
    if rng.random() >= prob:
        return image
    h, w = image.size
    ch = int(rng.integers(max(1, int(np.ceil(min_frac * h))), h + 1))
    cw = int(rng.integers(max(1, int(np.ceil(min_frac * w))), w + 1))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return crop(image, top, left, ch, cw)


def image_rng(global_seed: int, image_id: int, epoch: int = 0) -> np.random.Generator:
    """Per-image augmentation stream, independent of processing order."""
    return np.random.default_rng([global_seed ^ image_id, epoch])


def collate(images: Sequence[LabeledImage], patch: int):
    """Pad a batch to a common patch-aligned size; returns (pixels (B, H, W, C), objects per image)."""
    H = max(-(-im.size[0] // patch) * patch for im in images)
    W = max(-(-im.size[1] // patch) * patch for im in images)
    padded = [pad_to(im, (H, W)) for im in images]
    return np.stack([p.pixels for p in padded]), [p.objects for p in padded]
