"""Backward-pass behavior: tape semantics, accumulation, and agreement with
the central finite-difference oracle for every differentiable op."""

import numpy as np
import pytest

from aquaseg import tensor as T
from aquaseg.errors import ContractError
from conftest import gradcheck, rand_t4, rel_error


def test_sum_gradient_is_ones():
    x = T.Tensor4(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_half_quadratic_gradient_is_x():
    x = T.Tensor4(np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2), requires_grad=True)
    T.backward(T.scale(T.sum_all(T.mul(x, x)), 0.5))
    assert np.array_equal(x.grad, x.data)


def test_repeated_backward_accumulates_exactly_twice():
    x = T.Tensor4(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2), requires_grad=True)
    loss = T.mean_all(T.mul(x, x))
    T.backward(loss)
    once = x.grad.copy()
    T.backward(loss)
    assert np.array_equal(x.grad, 2 * once)


def test_backward_requires_scalar():
    x = T.Tensor4(np.zeros((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.relu(x))


def test_no_grad_suppresses_recording():
    x = T.Tensor4(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    with T.no_grad():
        out = T.mul(x, x)
    assert not out.requires_grad
    assert len(T.active_graph().entries) == 0


def test_maxpool_tie_goes_to_first_in_scan_order():
    x = T.Tensor4(np.full((1, 1, 2, 2), 5.0, dtype=np.float32), requires_grad=True)
    T.backward(T.sum_all(T.maxpool2d(x, 2)))
    expected = np.zeros((1, 1, 2, 2), dtype=np.float32)
    expected[0, 0, 0, 0] = 1.0
    assert np.array_equal(x.grad, expected)


def test_detach_blocks_gradient():
    x = T.Tensor4(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.sum_all(T.mul(y.detach(), y)))
    # only the non-detached branch contributes: d/dx (c * x^2) with c = x^2
    assert np.allclose(x.grad, 2.0 * x.data * x.data * x.data)


class TestFiniteDifferenceOracle:
    def test_sum_gives_ones(self):
        x = rand_t4(np.random.default_rng(0), (1, 2, 3, 3))
        fd = T.finite_difference_grad(lambda t: T.sum_all(t), x)
        assert np.allclose(fd.data, 1.0)

    def test_square_at_three(self):
        x = T.Tensor4(np.full((1, 1, 1, 1), 3.0), dtype=np.float64)
        fd = T.finite_difference_grad(lambda t: T.sum_all(T.mul(t, t)), x, eps=1e-4)
        assert abs(fd.item() - 6.0) < 1e-6

    def test_agrees_with_backward_on_conv_composite(self):
        rng = np.random.default_rng(4)
        x = rand_t4(rng, (1, 2, 6, 6), requires_grad=True)
        w = rand_t4(rng, (3, 2, 3, 3), requires_grad=True)
        probe = rand_t4(rng, (1, 3, 3, 3))

        def build():
            return T.sum_all(T.mul(T.maxpool2d(T.relu(T.conv2d(x, w, padding=1)), 2), probe))

        gradcheck(build, {"x": x, "w": w})


# one gradcheck per differentiable op, randomized probe so every output
# element gets a distinct adjoint
OP_CASES = {}


def _case(name):
    def deco(fn):
        OP_CASES[name] = fn
        return fn
    return deco


@_case("add")
def _build_add(rng):
    a = rand_t4(rng, (2, 2, 3, 3), requires_grad=True)
    b = rand_t4(rng, (2, 2, 3, 3), requires_grad=True)
    probe = rand_t4(rng, (2, 2, 3, 3))
    return lambda: T.sum_all(T.mul(T.add(a, b), probe)), {"a": a, "b": b}


@_case("sub")
def _build_sub(rng):
    a = rand_t4(rng, (1, 3, 2, 2), requires_grad=True)
    b = rand_t4(rng, (1, 3, 2, 2), requires_grad=True)
    probe = rand_t4(rng, (1, 3, 2, 2))
    return lambda: T.sum_all(T.mul(T.sub(a, b), probe)), {"a": a, "b": b}


@_case("mul")
def _build_mul(rng):
    a = rand_t4(rng, (1, 2, 3, 3), requires_grad=True)
    b = rand_t4(rng, (1, 2, 3, 3), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 3, 3))
    return lambda: T.sum_all(T.mul(T.mul(a, b), probe)), {"a": a, "b": b}


@_case("div")
def _build_div(rng):
    a = rand_t4(rng, (1, 1, 3, 3), requires_grad=True)
    b = T.Tensor4(rng.uniform(0.5, 2.0, (1, 1, 3, 3)), requires_grad=True, dtype=np.float64)
    probe = rand_t4(rng, (1, 1, 3, 3))
    return lambda: T.sum_all(T.mul(T.div(a, b), probe)), {"a": a, "b": b}


@_case("scale_add_scalar_neg")
def _build_affine(rng):
    a = rand_t4(rng, (1, 2, 2, 2), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 2, 2))
    return (lambda: T.sum_all(T.mul(T.neg(T.add_scalar(T.scale(a, 1.7), 0.3)), probe)),
            {"a": a})


@_case("log")
def _build_log(rng):
    a = T.Tensor4(rng.uniform(0.2, 3.0, (1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    probe = rand_t4(rng, (1, 2, 3, 3))
    return lambda: T.sum_all(T.mul(T.log(a), probe)), {"a": a}


@_case("relu")
def _build_relu(rng):
    # keep inputs clear of the kink at 0 where the derivative is undefined
    vals = rng.standard_normal((1, 2, 4, 4))
    vals = np.sign(vals) * (0.1 + np.abs(vals))
    a = T.Tensor4(vals, requires_grad=True, dtype=np.float64)
    probe = rand_t4(rng, (1, 2, 4, 4))
    return lambda: T.sum_all(T.mul(T.relu(a), probe)), {"a": a}


@_case("sigmoid")
def _build_sigmoid(rng):
    a = rand_t4(rng, (1, 2, 4, 4), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 4, 4))
    return lambda: T.sum_all(T.mul(T.sigmoid(a), probe)), {"a": a}


@_case("mean_all")
def _build_mean(rng):
    a = rand_t4(rng, (2, 2, 3, 3), requires_grad=True)
    return lambda: T.mean_all(a), {"a": a}


@_case("conv2d")
def _build_conv(rng):
    x = rand_t4(rng, (2, 2, 6, 6), requires_grad=True)
    w = rand_t4(rng, (3, 2, 3, 3), requires_grad=True)
    b = rand_t4(rng, (1, 3, 1, 1), requires_grad=True)
    probe = rand_t4(rng, (2, 3, 6, 6))
    return (lambda: T.sum_all(T.mul(T.conv2d(x, w, b, stride=1, padding=1), probe)),
            {"x": x, "w": w, "b": b})


@_case("conv2d_strided")
def _build_conv_strided(rng):
    x = rand_t4(rng, (1, 2, 7, 7), requires_grad=True)
    w = rand_t4(rng, (2, 2, 3, 3), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 3, 3))
    return (lambda: T.sum_all(T.mul(T.conv2d(x, w, stride=2, padding=0), probe)),
            {"x": x, "w": w})


@_case("conv_transpose2d")
def _build_convt(rng):
    x = rand_t4(rng, (1, 3, 4, 4), requires_grad=True)
    w = rand_t4(rng, (3, 2, 2, 2), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 8, 8))
    return (lambda: T.sum_all(T.mul(T.conv_transpose2d(x, w, stride=2), probe)),
            {"x": x, "w": w})


@_case("maxpool2d")
def _build_maxpool(rng):
    # redraw until every window's top two values are clearly separated, so
    # the argmax cannot flip inside the finite-difference probe
    while True:
        vals = rng.standard_normal((1, 2, 6, 6))
        win = vals.reshape(1, 2, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 2, 3, 3, 4)
        top = np.sort(win, axis=-1)
        if (top[..., 3] - top[..., 2]).min() > 1e-3:
            break
    x = T.Tensor4(vals, requires_grad=True, dtype=np.float64)
    probe = rand_t4(rng, (1, 2, 3, 3))
    return lambda: T.sum_all(T.mul(T.maxpool2d(x, 2), probe)), {"x": x}


@_case("upsample_nearest")
def _build_upsample(rng):
    x = rand_t4(rng, (1, 2, 3, 3), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 6, 6))
    return lambda: T.sum_all(T.mul(T.upsample_nearest(x, 2), probe)), {"x": x}


@_case("avgpool_downsample")
def _build_avgpool(rng):
    x = rand_t4(rng, (1, 2, 6, 6), requires_grad=True)
    probe = rand_t4(rng, (1, 2, 3, 3))
    return lambda: T.sum_all(T.mul(T.avgpool_downsample(x, 2), probe)), {"x": x}


@_case("concat_channels")
def _build_concat(rng):
    a = rand_t4(rng, (1, 2, 3, 3), requires_grad=True)
    b = rand_t4(rng, (1, 3, 3, 3), requires_grad=True)
    probe = rand_t4(rng, (1, 5, 3, 3))
    return lambda: T.sum_all(T.mul(T.concat_channels(a, b), probe)), {"a": a, "b": b}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck_op(name):
    for seed in range(5):
        build, tensors = OP_CASES[name](np.random.default_rng(1000 * seed + hash(name) % 997))
        gradcheck(build, tensors)


def test_adjoint_identity_property():
    rng = np.random.default_rng(13)
    for _ in range(10):
        stride = int(rng.integers(1, 3))
        k = int(rng.integers(2, 4))
        h = stride * int(rng.integers(2, 5)) + k
        x = T.Tensor4(rng.standard_normal((1, 2, h, h)), dtype=np.float64)
        w = T.Tensor4(rng.standard_normal((3, 2, k, k)), dtype=np.float64)
        fwd = T.conv2d(x, w, stride=stride, padding=0)
        y = T.Tensor4(rng.standard_normal(fwd.shape), dtype=np.float64)
        lhs = float((fwd.data * y.data).sum())
        rhs = float((x.data * T.conv_transpose2d(y, w, stride=stride).data).sum())
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


def test_float32_gradcheck_within_loose_tolerance():
    rng = np.random.default_rng(21)
    x = T.Tensor4(rng.standard_normal((1, 2, 6, 6)), requires_grad=True, dtype=np.float32)
    w = T.Tensor4(rng.standard_normal((2, 2, 3, 3)), requires_grad=True, dtype=np.float32)

    def build():
        return T.mean_all(T.sigmoid(T.conv2d(x, w, padding=1)))

    loss = build()
    T.backward(loss)
    fd = T.finite_difference_grad(lambda _t: build(), x, eps=1e-2)
    assert rel_error(x.grad, fd.data) < 1e-2
