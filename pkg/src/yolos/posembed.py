"""Learnable 1D positional embeddings and their on-the-fly 2D resampling.

Spatial slots are stored in raster order over a ``(rows, cols)`` grid,
followed by ``extra_slots`` non-spatial slots ([CLS] or [DET]) that are
never resampled.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad


class Placement(enum.Enum):
    FIRST_LAYER_ONLY = "first_layer_only"
    EVERY_LAYER = "every_layer"


@dataclass(frozen=True)
class PositionEmbedding:
    grid: tuple[int, int]
    extra_slots: int
    values: np.ndarray
    placement: Placement = Placement.FIRST_LAYER_ONLY

    def __post_init__(self):
        rows, cols = self.grid
        if self.values.ndim != 2 or self.values.shape[0] != rows * cols + self.extra_slots:
            raise ValueError(
                f"position embedding has {self.values.shape[0] if self.values.ndim else 0} rows, "
                f"expected {rows}*{cols}+{self.extra_slots}"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def num_params(self) -> int:
        return int(self.values.size)


@lru_cache(maxsize=256)
def linear_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) corner-aligned linear resampling matrix for one axis."""
    if src < 1 or dst < 1:
        raise ValueError(f"resampling extents must be positive, got src={src}, dst={dst}")
    out = np.zeros((dst, src))
    if src == 1:
        out[:, 0] = 1.0
        return out
    if dst == 1:
        out[0, 0] = 1.0
        return out
    pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    out[rows, lo] = 1.0 - frac
    out[rows, lo + 1] += frac
    return out


@lru_cache(maxsize=64)
def grid_weights(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """(dst_rows*dst_cols, src_rows*src_cols) bilinear matrix over raster-ordered grids."""
    m = np.kron(linear_weights(src[0], dst[0]), linear_weights(src[1], dst[1]))
    m.setflags(write=False)
    return m


def _resample_axis(x: np.ndarray, axis: int, dst: int) -> np.ndarray:
    """Corner-aligned linear resampling along one axis, written as a lerp so constants stay exact."""
    src = x.shape[axis]
    if src == 1 or dst == 1:
        return np.repeat(np.take(x, [0], axis=axis), dst, axis=axis)
    pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    shape = [1] * x.ndim
    shape[axis] = dst
    frac = (pos - lo).reshape(shape)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, lo + 1, axis=axis)
    return a + frac * (b - a)


def _check_grid(grid) -> tuple[int, int]:
    rows, cols = (int(g) for g in grid)
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must have positive extent, got {grid}")
    return rows, cols


def interpolate_pe(pe: PositionEmbedding, dst_grid) -> PositionEmbedding:
    dst = _check_grid(dst_grid)
    src = _check_grid(pe.grid)
    n = src[0] * src[1]
    spatial = pe.values[:n]
    extra = pe.values[n:]
    if dst == src:
        resampled = spatial.copy()
    else:
        g = spatial.reshape(src[0], src[1], -1)
        g = _resample_axis(_resample_axis(g, 0, dst[0]), 1, dst[1])
        resampled = g.reshape(dst[0] * dst[1], -1)
    return replace(pe, grid=dst, values=np.concatenate([resampled, extra.copy()], axis=0))


def interpolate_tensor(values: ad.Tensor, src_grid, dst_grid, extra_slots: int) -> ad.Tensor:
    """Differentiable counterpart of ``interpolate_pe`` for parameters held as tensors."""
    src = _check_grid(src_grid)
    dst = _check_grid(dst_grid)
    if src == dst:
        return values
    n = src[0] * src[1]
    spatial = ad.slice_axis(values, 0, 0, n)
    resampled = ad.matmul(ad.Tensor(grid_weights(src, dst)), spatial)
    if extra_slots == 0:
        return resampled
    return ad.concat([resampled, ad.slice_axis(values, 0, n, n + extra_slots)], axis=0)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass(frozen=True)
class PESet:
    """Positional embeddings for a detection model: one first-layer PE plus optional per-layer PEs."""

    first: PositionEmbedding
    intermediate: tuple[PositionEmbedding, ...]
    param_delta: int

    @property
    def num_params(self) -> int:
        return self.first.num_params + sum(p.num_params for p in self.intermediate)


def build_type1(pretrained: PositionEmbedding, depth: int, det_grid, det_tokens: int,
                mid_grid=None, rng: np.random.Generator | None = None) -> PESet:
    """Interpolated first-layer PE plus freshly initialized PEs for layers 2..depth.

    ``pretrained`` carries the classification-time extra slot ([CLS]); it is
    replaced by ``det_tokens`` fresh [DET] slots.
    """
    rng = rng or np.random.default_rng(0)
    det_grid = _check_grid(det_grid)
    mid = det_grid if mid_grid is None else _check_grid(mid_grid)
    first = _to_detection(pretrained, det_grid, det_tokens, rng)
    intermediate = tuple(
        PositionEmbedding(mid, det_tokens, trunc_normal(rng, (mid[0] * mid[1] + det_tokens, pretrained.dim)),
                          Placement.EVERY_LAYER)
        for _ in range(depth - 1)
    )
    delta = first.num_params + sum(p.num_params for p in intermediate) - pretrained.num_params
    return PESet(first, intermediate, delta)


def build_type2(pretrained: PositionEmbedding, det_grid, det_tokens: int,
                rng: np.random.Generator | None = None) -> PESet:
    """A single, enlarged first-layer PE; no intermediate PEs."""
    rng = rng or np.random.default_rng(0)
    first = _to_detection(pretrained, _check_grid(det_grid), det_tokens, rng)
    return PESet(first, (), first.num_params - pretrained.num_params)


def _to_detection(pretrained: PositionEmbedding, grid, det_tokens: int, rng) -> PositionEmbedding:
    spatial = interpolate_pe(replace(pretrained, extra_slots=0,
                                     values=pretrained.values[: pretrained.grid[0] * pretrained.grid[1]]), grid)
    det = trunc_normal(rng, (det_tokens, pretrained.dim))
    return PositionEmbedding(grid, det_tokens, np.concatenate([spatial.values, det]), Placement.FIRST_LAYER_ONLY)
