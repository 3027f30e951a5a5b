"""FLOPs accounting for plain ViT encoders and the w / dwr / fast-dwr scaling rules.

Convention: one multiply-accumulate counts as one FLOP. Softmax, LayerNorm,
GELU and residual additions are not counted.

Per encoder layer over a sequence of N tokens of width w:
    linear projections   N * w^2 * (4 + 2 * mlp_ratio)   (QKV 3, output 1, MLP 2 * ratio)
    spatial attention    2 * N^2 * w                     (Q K^T and A V)
so with mlp_ratio 4 the ratio f_lin / f_att is 6 w / N.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence, Union

Resolution = Union[int, tuple[int, int]]


class ScalingError(ValueError):
    pass


@dataclass(frozen=True)
class ScalePoint:
    """Architecture plus input resolution: everything FLOPs depend on."""

    depth: int
    width: int
    heads: int
    resolution: Resolution = 224
    patch_size: int = 16
    mlp_ratio: float = 4.0
    channels: int = 3
    name: str = ""

    @property
    def hw(self) -> tuple[int, int]:
        r = self.resolution
        return (r, r) if isinstance(r, int) else (int(r[0]), int(r[1]))


TABLE1 = {
    "Ti": ScalePoint(12, 192, 3, 224, name="YOLOS-Ti"),
    "S": ScalePoint(12, 384, 6, 224, name="YOLOS-S"),
    "B": ScalePoint(12, 768, 12, 224, name="YOLOS-B"),
    "S-dwr": ScalePoint(19, 240, 6, 272, name="YOLOS-S (dwr)"),
    "S-fast-dwr": ScalePoint(14, 330, 6, 240, name="YOLOS-S (fast dwr)"),
}


@dataclass(frozen=True)
class FlopsReport:
    f_lin: float
    f_att: float
    f_stem: float
    f_heads: float
    total: float
    ratio: float
    seq_len: int

    def as_dict(self) -> dict:
        return asdict(self)


def seq_len(resolution: Resolution, patch: int, extra_tokens: int = 0) -> int:
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    if h % patch or w % patch:
        raise ValueError(f"resolution {h}x{w} is not divisible by patch size {patch}")
    return (h // patch) * (w // patch) + extra_tokens


def flops(point: ScalePoint, resolution: Resolution | None = None, extra_tokens: int = 1,
          head_classes: int | None = None) -> FlopsReport:
    """FLOPs of one forward pass.

    ``head_classes`` adds the two detector MLPs over ``extra_tokens`` [DET]
    rows (class head D->D->D->classes+1, box head D->D->D->4); they are
    reported separately in ``f_heads`` and kept out of the ratio.
    """
    res = point.hw if resolution is None else resolution
    n_patches = seq_len(res, point.patch_size, 0)
    n = n_patches + extra_tokens
    w = point.width
    d = point.depth
    f_lin = d * n * w * w * (4 + 2 * point.mlp_ratio)
    f_att = d * 2.0 * n * n * w
    f_stem = n_patches * point.patch_size ** 2 * point.channels * w
    f_heads = 0.0
    if head_classes is not None:
        f_heads = extra_tokens * (4 * w * w + w * (head_classes + 1) + 4 * w)
    total = f_lin + f_att + f_stem + f_heads
    return FlopsReport(float(f_lin), float(f_att), float(f_stem), float(f_heads), float(total), f_lin / f_att, n)


def ratio_sweep(point: ScalePoint, resolutions: Sequence[Resolution],
                extra_tokens: Union[int, Sequence[int]] = 1) -> list[tuple[Resolution, float]]:
    extras = [extra_tokens] * len(resolutions) if isinstance(extra_tokens, int) else list(extra_tokens)
    if len(extras) != len(resolutions):
        raise ValueError("one extra-token count per resolution is required")
    return [(r, flops(point, r, e).ratio) for r, e in zip(resolutions, extras)]


def _nearest_multiple(x: float, k: int) -> int:
    return max(k, int(math.floor(x / k + 0.5)) * k)


def _scale(base: ScalePoint, target: float, e_d: float, e_w: float, e_r: float, extra_tokens: int,
           tolerance: float, heads: int | None) -> ScalePoint:
    base_total = flops(base, extra_tokens=extra_tokens).total
    if target < base_total * (1 - 1e-12):
        raise ScalingError(f"target {target:.4g} FLOPs is below the base model's {base_total:.4g}")
    f = target / base_total
    heads = base.heads if heads is None else heads
    p = base.patch_size
    h, w_res = base.hw
    depth = max(1, int(math.floor(base.depth * f ** e_d + 0.5)))
    width = _nearest_multiple(base.width * f ** e_w, heads)
    res_h = max(p, int(h * f ** e_r + 1e-9) // p * p)
    res_w = max(p, int(w_res * f ** e_r + 1e-9) // p * p)
    resolution: Resolution = res_h if (res_h == res_w and isinstance(base.resolution, int)) else (res_h, res_w)
    point = replace(base, depth=depth, width=width, heads=heads, resolution=resolution, name="")
    err = flops(point, extra_tokens=extra_tokens).total / target - 1
    if abs(err) <= tolerance:
        return point
    # rounding overshot or undershot the budget: let width absorb the residual
    best = min(
        (replace(point, width=k * heads) for k in range(1, 8 * width // heads + 2)),
        key=lambda q: abs(flops(q, extra_tokens=extra_tokens).total / target - 1),
    )
    err = flops(best, extra_tokens=extra_tokens).total / target - 1
    if abs(err) > tolerance:
        raise ScalingError(f"no width that is a multiple of {heads} lands within {tolerance:.0%} of the "
                           f"target (closest {best.width}, off by {err:+.1%})")
    return best


def scale_width(base: ScalePoint, target: float, extra_tokens: int = 1, tolerance: float = 0.08,
                heads: int | None = None) -> ScalePoint:
    """Width-only scaling (w): w <- w * F^(1/2)."""
    return _scale(base, target, 0.0, 0.5, 0.0, extra_tokens, tolerance, heads)


def scale_uniform(base: ScalePoint, target: float, extra_tokens: int = 1, tolerance: float = 0.08,
                  heads: int | None = None) -> ScalePoint:
    """Uniform compound scaling (dwr): d * F^(1/3), w * F^(1/6), r * F^(1/6).

    Depth rounds to nearest, width to the nearest multiple of the head count,
    resolution down to a multiple of the patch size. ``heads`` sets the
    scaled model's head count (default: the base's).
    """
    return _scale(base, target, 1 / 3, 1 / 6, 1 / 6, extra_tokens, tolerance, heads)


def fast_exponents(alpha: float) -> tuple[float, float, float]:
    """(e_d, e_w, e_r) for fast scaling; they keep d * w^2 * r^2 proportional to F for every alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1 - alpha) / 3, (1 + 2 * alpha) / 6, (1 - alpha) / 6


def scale_fast(base: ScalePoint, target: float, alpha: float = 0.8, extra_tokens: int = 1,
               tolerance: float = 0.08, heads: int | None = None) -> ScalePoint:
    """Fast scaling (fast dwr): width takes most of the growth, depth and resolution the rest."""
    e_d, e_w, e_r = fast_exponents(alpha)
    return _scale(base, target, e_d, e_w, e_r, extra_tokens, tolerance, heads)


def vit_params(point: ScalePoint, extra_slots: int = 1, pe_slots: int | None = None, head: str = "cls",
               num_classes: int = 1000, mid_pe_slots: int = 0) -> int:
    """Parameter count of a ViT classifier (``head="cls"``) or detector (``head="det"``).

    ``pe_slots`` overrides the first-layer positional-embedding row count;
    ``mid_pe_slots`` is the row count of each of the ``depth - 1`` intermediate PEs.
    """
    w, d = point.width, point.depth
    hidden = int(round(w * point.mlp_ratio))
    n_patches = seq_len(point.hw, point.patch_size, 0)
    per_layer = 4 * w + (3 * w * w + 3 * w) + (w * w + w) + (w * hidden + hidden) + (hidden * w + w)
    total = d * per_layer + 2 * w
    total += point.patch_size ** 2 * point.channels * w + w
    total += (n_patches + extra_slots if pe_slots is None else pe_slots) * w
    total += extra_slots * w  # [CLS] or [DET] embeddings
    if head == "cls":
        total += w * num_classes + num_classes
    else:
        mlp = 2 * (w * w + w)
        total += mlp + w * (num_classes + 1) + num_classes + 1
        total += mlp + 4 * w + 4
    total += (d - 1) * mid_pe_slots * w
    return total


def format_table(rows: Sequence[tuple[str, ScalePoint, FlopsReport]]) -> str:
    header = ("model", "depth", "width", "heads", "res", "N", "FLOPs(G)", "f_lin/f_att")
    body = []
    for name, pt, rep in rows:
        h, w = pt.hw
        res = str(h) if h == w else f"{h}x{w}"
        body.append((name, str(pt.depth), str(pt.width), str(pt.heads), res, str(rep.seq_len),
                     f"{rep.total / 1e9:.2f}", f"{rep.ratio:.2f}"))
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
             for r in [header, *body]]
    return "\n".join(lines)
