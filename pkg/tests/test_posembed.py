import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yolos import autodiff as ad
from yolos.posembed import (
    Placement,
    PositionEmbedding,
    build_type1,
    build_type2,
    interpolate_pe,
    interpolate_tensor,
    linear_weights,
    trunc_normal,
)
from yolos.scaling import TABLE1, vit_params


def _pe(grid, extra=2, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return PositionEmbedding(grid, extra, rng.normal(size=(grid[0] * grid[1] + extra, dim)))


def test_identity_at_equal_grid():
    pe = _pe((4, 5))
    out = interpolate_pe(pe, (4, 5))
    np.testing.assert_array_equal(out.values, pe.values)


def test_constant_preserved_exactly():
    pe = PositionEmbedding((3, 4), 1, np.full((13, 2), 0.7))
    out = interpolate_pe(pe, (7, 9))
    assert np.all(out.values == 0.7)


def test_two_by_two_to_three_by_three():
    pe = PositionEmbedding((2, 2), 0, np.array([[0.0], [1.0], [2.0], [3.0]]))
    out = interpolate_pe(pe, (3, 3)).values[:, 0].reshape(3, 3)
    expected = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_det_slots_bit_identical():
    pe = _pe((3, 3), extra=5)
    out = interpolate_pe(pe, (6, 11))
    assert out.values.shape == (66 + 5, 3)
    np.testing.assert_array_equal(out.values[-5:], pe.values[-5:])


def test_rejects_zero_extent():
    with pytest.raises(ValueError):
        interpolate_pe(_pe((3, 3)), (0, 4))


def test_target_50x84_row_count():
    pe = _pe((14, 14), extra=100, dim=2)
    assert interpolate_pe(pe, (50, 84)).values.shape[0] == 50 * 84 + 100


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(r, c, dr, dc, a, b):
    x, y = _pe((r, c), seed=1), _pe((r, c), seed=2)
    combo = PositionEmbedding((r, c), 2, a * x.values + b * y.values)
    lhs = interpolate_pe(combo, (dr, dc)).values
    rhs = a * interpolate_pe(x, (dr, dc)).values + b * interpolate_pe(y, (dr, dc)).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 12))
def test_corners_align(src, dst):
    w = linear_weights(src, dst)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-15)
    assert w[0, 0] == 1.0 and w[-1, -1] == 1.0


def test_tensor_version_matches_and_differentiates():
    pe = _pe((3, 4), extra=2)
    t = ad.Tensor(pe.values, requires_grad=True)
    out = interpolate_tensor(t, (3, 4), (5, 2), 2)
    np.testing.assert_allclose(out.data, interpolate_pe(pe, (5, 2)).values, atol=1e-14)
    err = ad.grad_check(lambda v: ad.sum(ad.gelu(interpolate_tensor(v, (3, 4), (5, 2), 2))), pe.values)
    assert err < 1e-6


def test_trunc_normal_bounds():
    x = trunc_normal(np.random.default_rng(0), (20000,), std=0.02)
    assert np.abs(x).max() <= 0.04
    assert abs(x.mean()) < 1e-3


def test_type1_small_analogue_table7_row():
    pre = PositionEmbedding((14, 14), 1, np.zeros((197, 4)))
    s = build_type1(pre, depth=12, det_grid=(32, 54), det_tokens=100, mid_grid=(32, 54))
    assert s.first.grid == (32, 54)
    assert len(s.intermediate) == 11
    assert all(p.grid == (32, 54) and p.placement is Placement.EVERY_LAYER for p in s.intermediate)
    per = (32 * 54 + 100) * 4
    assert s.param_delta == per * 12 - 197 * 4


def test_type1_depth_one_has_no_intermediate():
    pre = PositionEmbedding((2, 2), 1, np.zeros((5, 4)))
    s = build_type1(pre, depth=1, det_grid=(2, 2), det_tokens=3)
    assert s.intermediate == ()


def test_type2_same_size_keeps_spatial_bytes():
    pre = _pe((4, 4), extra=1, dim=4)
    s = build_type2(pre, (4, 4), det_tokens=1)
    np.testing.assert_array_equal(s.first.values[:16], pre.values[:16])
    assert s.param_delta == 0


def test_type2_tiny_params_table8():
    ti = TABLE1["Ti"]
    base = vit_params(ti, extra_slots=1, head="cls")
    # detection at 800 x 1333 (stored grid 50 x 84) with 100 [DET] tokens and 91 COCO classes
    det = vit_params(ti, extra_slots=100, pe_slots=50 * 84 + 100, head="det", num_classes=91)
    assert round(base / 1e6, 1) == 5.7
    assert round(det / 1e6, 1) == 6.5


def test_type2_fewer_params_than_type1():
    pre = _pe((4, 4), extra=1, dim=4)
    t1 = build_type1(pre, 3, (6, 6), 2, mid_grid=(6, 6))
    t2 = build_type2(pre, (6, 6), 2)
    assert t2.num_params < t1.num_params
