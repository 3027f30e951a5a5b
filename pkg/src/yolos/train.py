"""Training loop: batched forward, per-image matching, set loss, AdamW under a cosine schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import (LabeledImage, collate, gen_shapes, image_rng, load_annotations, multi_scale_sample, random_crop,
                   resize_shortest)
from .evaluate import ApReport, evaluate_ap, predictions_from_logits
from .matching import batch_set_loss, match_batch
from .model import Detector, init_heads
from .optim import AdamW, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, last_good: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainResult:
    detector: Detector
    records: list[dict] = field(default_factory=list)
    initial: dict = field(default_factory=dict)  # name -> array snapshot at step 0


def snapshot(params: dict) -> dict:
    return {k: t.data.copy() for k, t in params.items()}


EVAL_SEED_OFFSET = 1000


def load_split(cfg: RunConfig, split: str = "train", path=None) -> list[LabeledImage]:
    """Training or held-out images for a run.

    Synthetic data draws the held-out split from ``data_seed + 1000`` so the
    two never share a generator stream. ``path`` (or a non-synthetic
    ``data.source``) names a COCO-style annotation file instead.
    """
    d = cfg.data
    source = path or d.source
    if source == "synthetic":
        seed, count = (d.data_seed, d.train_count) if split == "train" else (d.data_seed + EVAL_SEED_OFFSET, d.eval_count)
        return gen_shapes(seed, count, d.canvas, d.max_objects, cfg.model.num_classes, d.min_size, d.max_size)
    anns = load_annotations(source)
    if len(anns.categories) > cfg.model.num_classes:
        raise ValueError(f"{source}: {len(anns.categories)} categories but the model has "
                         f"{cfg.model.num_classes} classes")
    return [anns.load(im) for im in anns]


def augment(image: LabeledImage, cfg: RunConfig, epoch: int) -> LabeledImage:
    d = cfg.data
    rng = image_rng(cfg.seed, image.id, epoch)
    if d.crop_prob > 0:
        image = random_crop(rng, image, d.crop_prob, d.crop_min_frac)
    short = multi_scale_sample(rng, (d.short_min, d.short_max), cfg.model.patch_size)
    if image.size == tuple(d.canvas) and short == min(d.canvas) and max(d.canvas) <= d.long_max:
        return image
    return resize_shortest(image, short, d.long_max, cfg.model.patch_size)


def train(cfg: RunConfig, images: Sequence[LabeledImage], detector: Optional[Detector] = None,
          on_record: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``cfg.optim.total_steps`` steps on ``images``.

    A supplied ``detector`` is a warm start: its heads and [DET] tokens are
    re-initialized, everything else is kept.
    """
    rng = np.random.default_rng(cfg.seed)
    if detector is None:
        detector = Detector.create(cfg.model, cfg.seed)
    else:
        init_rng = np.random.default_rng([cfg.seed, 1])
        init_heads(cfg.model, init_rng, detector.params)
        from .posembed import trunc_normal

        detector.params["det_tokens"] = ad.Tensor(
            trunc_normal(init_rng, detector.params["det_tokens"].shape), requires_grad=True)
    params = detector.params
    frozen = {"det_tokens"} if cfg.detach_det_tokens else set()
    for name, t in params.items():
        t.requires_grad = name not in frozen
    no_decay = {k for k in params if k.endswith(".bias") or ".ln" in k or k.startswith("norm.")}
    opt = AdamW(params, cfg.optim.learning_rate, weight_decay=cfg.optim.weight_decay,
                frozen=frozen, no_decay=no_decay)
    result = TrainResult(detector, initial=snapshot(params))
    total = cfg.optim.total_steps
    bs = min(cfg.optim.batch_size, len(images)) if len(images) else 0
    order: list[int] = []
    epoch = -1
    last_good = snapshot(params)
    for step in range(total):
        if len(order) < bs:
            epoch += 1
            order.extend(rng.permutation(len(images)).tolist())
        batch_idx, order = order[:bs], order[bs:]
        batch = [augment(images[i], cfg, epoch) for i in batch_idx]
        pixels, targets = collate(batch, cfg.model.patch_size)
        out = detector(pixels)
        if not (np.isfinite(out.class_logits.data).all() and np.isfinite(out.boxes.data).all()):
            raise NonFiniteLoss(step, last_good)
        matches = match_batch(out, targets, cfg.loss)
        report = batch_set_loss(out.class_logits, out.boxes, targets, matches, cfg.loss)
        if not math.isfinite(report.total):
            raise NonFiniteLoss(step, last_good)
        opt.zero_grad()
        report.tensor.backward()
        clip_grad_norm({k: v for k, v in params.items() if k not in frozen}, cfg.optim.grad_clip)
        lr = cosine_lr(step, total, cfg.optim.learning_rate, cfg.optim.warmup_steps)
        opt.step(lr)
        record = {"step": step, "total": report.total, "cls": report.class_term,
                  "l1": report.l1_term, "giou": report.giou_term, "lr": lr}
        result.records.append(record)
        if on_record is not None:
            on_record(record)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, report.total)
            last_good = snapshot(params)
    opt.zero_grad()
    return result


def predict_images(detector: Detector, images: Sequence[LabeledImage], batch_size: int = 32,
                   score_threshold: float = 0.0):
    """Foreground predictions per image (normalized to each image's own padded frame)."""
    preds, gts = [], []
    p = detector.config.patch_size
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        pixels, targets = collate(chunk, p)
        with ad.no_grad():
            out = detector(pixels)
        for b, im in enumerate(chunk):
            preds.append(predictions_from_logits(out.class_logits.data[b], out.boxes.data[b], im.id, score_threshold))
            gts.append(targets[b])
    return preds, gts


def evaluate_detector(detector: Detector, images: Sequence[LabeledImage], short: Optional[int] = None,
                      long_max: Optional[int] = None, batch_size: int = 32) -> ApReport:
    p = detector.config.patch_size
    if short is not None:
        images = [resize_shortest(im, short, long_max or 10 ** 9, p) for im in images]
    preds, gts = predict_images(detector, images, batch_size)
    return evaluate_ap(preds, gts, num_classes=detector.config.num_classes)


def write_loss_log(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
