import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from yolos import autodiff as ad
from yolos.autodiff import ShapeError, Tensor, grad_check


def test_softmax_equal_logits():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_layernorm_normalizes():
    out = ad.layernorm(Tensor([1.0, 2.0, 3.0]), eps=1e-6).data
    assert abs(out.mean()) < 1e-9
    # eps shifts the variance by eps / (var + eps)
    assert abs(out.var() - 1.0) < 2e-6


def test_matmul_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_relu_negative_derivative():
    x = Tensor(-1.0, requires_grad=True)
    ad.relu(x).backward()
    assert x.grad == 0.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)


def test_backward_repeatable_after_zeroing():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)))

    def run():
        w.grad = None
        ad.sum(ad.gelu(ad.matmul(x, w))).backward()
        return w.grad.copy()

    np.testing.assert_array_equal(run(), run())


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_zero_length_axis_rejected():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.ones((2, 0))))
    with pytest.raises(ShapeError):
        ad.layernorm(Tensor(np.ones((2, 0))))


def test_broadcast_leading_axes_only():
    a = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.ones((3, 4)))
    assert ad.add(a, b).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(np.ones((3, 1))))


def test_grad_check_quadratic_exact():
    assert grad_check(lambda x: ad.sum(x * x), np.linspace(-2, 2, 7)) < 1e-8


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore", invalid="ignore"):
        grad_check(lambda x: ad.sum(ad.div(x, x - x)), np.ones(2))


def test_grad_check_gelu_composition():
    rng = np.random.default_rng(1)
    assert grad_check(lambda x: ad.sum(ad.gelu(ad.gelu(x) * 1.5)), rng.normal(size=10)) < 1e-4


def test_grad_check_encoder_layer():
    from yolos.model import ModelConfig, encoder_layer, init_params, _layer_params

    cfg = ModelConfig(depth=1, width=8, heads=2, det_tokens=2, pe_grid=(2, 2), mid_pe_grid=(2, 2))
    params = init_params(cfg, np.random.default_rng(0))
    lp = {k: Tensor(v.data * 20) for k, v in _layer_params(params, 0).items()}
    point = np.random.default_rng(2).normal(size=(5, 8))
    err = grad_check(lambda z: ad.sum(encoder_layer(z, lp, 2)[0]), point)
    assert err < 1e-4


_UNARY = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "gelu": ad.gelu,
    "absolute": ad.absolute,
    "softmax": ad.softmax,
    "layernorm": lambda x: ad.layernorm(x),
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "scale": lambda x: ad.scale(x, -2.5),
    "mean": lambda x: ad.mean(x, axis=0),
    "slice": lambda x: ad.slice_axis(x, 1, 1, 3),
    "take_rows": lambda x: ad.take_rows(x, [2, 0, 2]),
    "permute": lambda x: ad.permute(ad.reshape(x, (3, 2, 2)), (2, 0, 1)),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = _UNARY[name]
    proj = rng.normal(size=fn(Tensor(np.zeros((3, 4)))).shape)
    worst = 0.0
    for _ in range(100):
        point = rng.normal(size=(3, 4))
        if name in ("relu", "absolute"):
            point[np.abs(point) < 1e-3] += 0.01  # keep clear of the kink
        worst = max(worst, grad_check(lambda x: ad.sum(fn(x) * Tensor(proj)), point))
    assert worst < 1e-4


_BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "l1": lambda a, b: ad.l1_distance(a, b * 0.5),
}


@pytest.mark.parametrize("name", sorted(_BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = _BINARY[name]
    other = rng.normal(size=(3, 4))
    worst = 0.0
    for _ in range(100):
        a = rng.normal(size=(3, 4))
        b = Tensor(rng.normal(size=(3, 4)))
        proj = Tensor(rng.normal(size=fn(Tensor(a), b).shape))
        worst = max(worst, grad_check(lambda x: ad.sum(fn(x, b) * proj), a))
        worst = max(worst, grad_check(lambda y: ad.sum(fn(Tensor(other), y) * proj), b.data))
    assert worst < 1e-4


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(3)
    targets = np.array([0, 3, 1, 3])
    w = np.array([1.0, 1.0, 1.0, 0.1])
    worst = max(grad_check(lambda x: ad.cross_entropy(x, targets, w), rng.normal(size=(4, 4)))
                for _ in range(100))
    assert worst < 1e-4
    val = ad.cross_entropy(Tensor(np.zeros((4, 4))), targets, w).item()
    assert val == pytest.approx((1.0 + 0.1 + 1.0 + 0.1) * np.log(4) / 4, abs=1e-15)


def test_batched_matmul_shared_weight():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(4, 3))
    x = Tensor(rng.normal(size=(2, 5, 4)))
    assert grad_check(lambda t: ad.sum(ad.gelu(ad.matmul(x, t))), w) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
def test_layernorm_moments(x):
    x = x + np.arange(6) * 1e-2  # avoid exactly constant rows
    out = ad.layernorm(Tensor(x), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(x * 2.0)
    assert not y.requires_grad
