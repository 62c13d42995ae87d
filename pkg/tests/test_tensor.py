import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cramnet import tensor as T
from conftest import conv_loops, numeric_grad, rel_error


def test_conv_same_keeps_spatial_size():
    x = np.zeros((32, 32, 3))
    k = np.zeros((3, 3, 3, 32))
    assert T.conv2d_forward(x, k, np.zeros(32), "same").shape == (32, 32, 32)


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(5, 7, 1))
    y = T.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1), "same")
    assert np.array_equal(y, x)


def test_conv_all_ones_on_ones():
    y = T.conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), "same")[..., 0]
    assert np.array_equal(y, [[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])


def test_conv_valid_shrinks_by_kernel_halfwidth():
    y = T.conv2d_forward(np.ones((15, 15, 2)), np.ones((3, 3, 2, 4)), np.zeros(4), "valid")
    assert y.shape == (13, 13, 4)


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("kernel", [(1, 1), (3, 3), (5, 3)])
def test_conv_matches_direct_summation(rng, padding, kernel):
    x = rng.normal(size=(6, 7, 2))
    k = rng.normal(size=kernel + (2, 3))
    b = rng.normal(size=3)
    assert np.allclose(T.conv2d_forward(x, k, b, padding), conv_loops(x, k, b, padding), rtol=0, atol=1e-12)


def test_conv_batched_equals_per_sample(rng):
    x = rng.normal(size=(3, 5, 5, 2))
    k, b = rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
    y = T.conv2d_forward(x, k, b)
    for i in range(3):
        assert np.allclose(y[i], conv_loops(x[i], k, b, "same"), atol=1e-12)


def test_conv_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(np.ones((4, 4, 1)), np.ones((2, 2, 1, 1)), np.zeros(1))


def test_kernel_stack_properties():
    ks = T.KernelStack(np.zeros((3, 5, 2, 7)))
    assert (ks.height, ks.width, ks.in_channels, ks.out_channels, ks.half_width) == (3, 5, 2, 7, 2)
    assert ks.weights.size == 3 * 5 * 2 * 7


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_backward_finite_differences(rng, padding):
    x = rng.normal(size=(6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    up = rng.normal(size=T.conv2d_forward(x, k, b, padding).shape)

    def f():
        return float((T.conv2d_forward(x, k, b, padding) * up).sum())

    gx, gk, gb = T.conv2d_backward(up, x, k, padding)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gk, numeric_grad(f, k)) < 1e-4
    assert rel_error(gb, numeric_grad(f, b)) < 1e-4


def test_conv_backward_zero_upstream(rng):
    x, k = rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3))
    grads = T.conv2d_backward(np.zeros((2, 5, 5, 3)), x, k)
    assert all(not g.any() for g in grads)


def test_conv_backward_identity_kernel(rng):
    g = rng.normal(size=(4, 4, 1))
    gx, _, _ = T.conv2d_backward(g, rng.normal(size=(4, 4, 1)), np.ones((1, 1, 1, 1)))
    assert np.array_equal(gx, g)


def test_conv_backward_shape_mismatch(rng):
    with pytest.raises(T.ShapeError):
        T.conv2d_backward(np.zeros((4, 4, 2)), np.zeros((4, 4, 1)), np.ones((3, 3, 1, 3)))


def test_dense_forward_examples():
    assert np.array_equal(T.dense_forward([3.0, 4.0], np.eye(2), np.zeros(2)), [3.0, 4.0])
    assert np.array_equal(T.dense_forward([2.0, 3.0], [[1.0, 1.0]], [1.0]), [6.0])
    with pytest.raises(T.ShapeError):
        T.dense_forward([1.0, 2.0, 3.0], np.eye(2), np.zeros(2))


def test_dense_backward(rng):
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    up = rng.normal(size=(4, 3))

    def f():
        return float((T.dense_forward(x, w, b) * up).sum())

    gx, gw, gb = T.dense_backward(up, x, w)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gw, numeric_grad(f, w)) < 1e-4
    assert rel_error(gb, numeric_grad(f, b)) < 1e-4
    zero = T.dense_backward(np.zeros((4, 3)), x, w)
    assert all(not g.any() for g in zero)
    g = rng.normal(size=(2, 3))
    assert np.array_equal(T.dense_backward(g, rng.normal(size=(2, 3)), np.eye(3))[0], g)


def test_maxpool_examples():
    x = np.arange(1.0, 17.0).reshape(4, 4, 1)
    y, _ = T.maxpool2d(x)
    assert np.array_equal(y[..., 0], [[6.0, 8.0], [14.0, 16.0]])
    c, _ = T.maxpool2d(np.full((6, 6, 2), 3.5))
    assert np.all(c == 3.5)
    assert T.maxpool2d(np.zeros((13, 13, 1)))[0].shape == (6, 6, 1)
    with pytest.raises(T.ShapeError):
        T.maxpool2d(np.zeros((1, 4, 1)))


def test_maxpool_backward_routes_to_first_max():
    x = np.array([[1.0, 5.0], [5.0, 2.0]]).reshape(2, 2, 1)
    _, idx = T.maxpool2d(x)
    g = T.maxpool2d_backward(np.array([[[7.0]]]), idx, x.shape)
    assert np.array_equal(g[..., 0], [[0.0, 7.0], [0.0, 0.0]])


def test_maxpool_backward_finite_differences(rng):
    x = rng.normal(size=(2, 5, 7, 3))
    y, idx = T.maxpool2d(x)
    up = rng.normal(size=y.shape)

    def f():
        return float((T.maxpool2d(x)[0] * up).sum())

    g = T.maxpool2d_backward(up, idx, x.shape)
    assert rel_error(g, numeric_grad(f, x)) < 1e-4
    # truncated last row/column receives nothing
    assert not g[:, 4].any() and not g[:, :, 6].any()


def test_relu():
    y, _ = T.relu([-1.0, 0.0, 2.0])
    assert np.array_equal(y, [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0])
    assert np.array_equal(T.relu(x)[0], x)


def test_relu_backward(rng):
    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    up = rng.normal(size=x.shape)
    y, mask = T.relu(x)

    def f():
        return float((T.relu(x)[0] * up).sum())

    assert rel_error(T.relu_backward(up, mask), numeric_grad(f, x)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(3, 9), w=st.integers(3, 9), cin=st.integers(1, 3), cout=st.integers(1, 3),
    kh=st.sampled_from([1, 3]), kw=st.sampled_from([1, 3]), padding=st.sampled_from(["same", "valid"]),
)
def test_conv_shape_algebra(h, w, cin, cout, kh, kw, padding):
    y = T.conv2d_forward(np.ones((2, h, w, cin)), np.ones((kh, kw, cin, cout)), np.zeros(cout), padding)
    expect = (h, w) if padding == "same" else (h - kh + 1, w - kw + 1)
    assert y.shape == (2,) + expect + (cout,)
    assert y.shape[1:3] == T.conv_output_hw(h, w, kh, kw, padding)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 15), w=st.integers(2, 15), c=st.integers(1, 4))
def test_pool_shape_algebra(h, w, c):
    y, _ = T.maxpool2d(np.zeros((h, w, c)))
    assert y.shape == (h // 2, w // 2, c)
