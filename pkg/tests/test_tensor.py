import numpy as np
import pytest
from conftest import central_diff, rel_err

from efficientiml import tensor as T


def test_matmul_identity_and_projector():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(T.matmul(np.eye(2), a), a)
    assert np.array_equal(T.matmul(np.array([[1.0, 0], [0, 0]]), np.array([[5.0, 6], [7, 8]])),
                          [[5, 6], [0, 0]])


def test_matmul_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert rel_err(T.matmul(a, b), ref) <= 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(np.zeros((3, 4)), np.zeros((3, 2)))


def test_broadcast_rules():
    x = np.ones((2, 3, 4))
    assert T.add(x, np.ones(4)).shape == (2, 3, 4)
    assert T.mul(x, 2.0).shape == (2, 3, 4)
    with pytest.raises(T.ShapeError):
        T.add(x, np.ones(3))


def _dw_oracle(x, k, stride):
    H, W, C = x.shape
    K = k.shape[0]
    p = K // 2
    Ho, Wo = -(-H // stride), -(-W // stride)
    out = np.zeros((Ho, Wo, C))
    for oy in range(Ho):
        for ox in range(Wo):
            for c in range(C):
                s = 0.0
                for i in range(K):
                    for j in range(K):
                        y, xx = oy * stride + i - p, ox * stride + j - p
                        if 0 <= y < H and 0 <= xx < W:
                            s += x[y, xx, c] * k[i, j, c]
                out[oy, ox, c] = s
    return out


def test_depthwise_identity_kernel():
    x = np.ones((3, 3, 1))
    k = np.zeros((3, 3, 1))
    k[1, 1] = 1
    assert np.array_equal(T.depthwise_conv2d(x, k), x)


def test_depthwise_sum_one_interior(rng):
    x = np.full((6, 6, 2), 3.0)
    k = rng.random((3, 3, 2))
    k /= k.sum(axis=(0, 1))
    y = T.depthwise_conv2d(x, k)
    assert np.allclose(y[1:-1, 1:-1], 3.0, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("K", [3, 5])
def test_depthwise_nested_loop(rng, stride, K):
    x, k = rng.normal(size=(5, 5, 2)), rng.normal(size=(K, K, 2))
    assert rel_err(T.depthwise_conv2d(x, k, stride), _dw_oracle(x, k, stride)) <= 1e-6


def test_kernel_validation():
    with pytest.raises(ValueError):
        T.depthwise_conv2d(np.zeros((4, 4, 1)), np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        T.depthwise_conv2d(np.zeros((4, 4, 1)), np.zeros((3, 3, 1)), stride=3)


def test_conv2d_nested_loop(rng):
    x, w = rng.normal(size=(5, 6, 3)), rng.normal(size=(3, 3, 3, 4))
    for stride in (1, 2):
        y = T.conv2d(x, w, stride=stride)
        ref = np.stack([sum(_dw_oracle(x[..., ci:ci + 1], w[:, :, ci:ci + 1, co], stride)[..., 0]
                            for ci in range(3)) for co in range(4)], axis=-1)
        assert rel_err(y, ref) <= 1e-6


def test_conv2d_backward_fd(rng):
    x, w, b = rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    g = rng.normal(size=(1, 3, 3, 3))
    f = lambda: float((T.conv2d(x, w, b, stride=2) * g).sum())  # noqa: E731
    dx, dw, db = T.conv2d_backward(x, w, g, stride=2)
    assert rel_err(dx, central_diff(f, x)) <= 1e-6
    assert rel_err(dw, central_diff(f, w)) <= 1e-6
    assert rel_err(db, central_diff(f, b)) <= 1e-6


def test_depthwise_backward_fd(rng):
    x, k = rng.normal(size=(2, 5, 4, 3)), rng.normal(size=(3, 3, 3))
    g = rng.normal(size=(2, 5, 4, 3))
    f = lambda: float((T.depthwise_conv2d(x, k) * g).sum())  # noqa: E731
    dx, dk, _ = T.depthwise_conv2d_backward(x, k, g)
    assert rel_err(dx, central_diff(f, x)) <= 1e-6
    assert rel_err(dk, central_diff(f, k)) <= 1e-6


def test_sigmoid_values():
    assert T.sigmoid(0.0) == 0.5
    s = T.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.isfinite(s).all() and s[0] == 0.0 and s[1] == 1.0


def test_layer_norm_constant_and_grad(rng):
    y, _ = T.layer_norm(np.full((2, 5), 7.0), np.ones(5), np.zeros(5))
    assert np.allclose(y, 0.0)
    x, gm, bt = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    g = rng.normal(size=(3, 6))
    f = lambda: float((T.layer_norm(x, gm, bt)[0] * g).sum())  # noqa: E731
    _, cache = T.layer_norm(x, gm, bt)
    dx, dg, db = T.layer_norm_backward(g, cache)
    assert rel_err(dx, central_diff(f, x)) <= 1e-6
    assert rel_err(dg, central_diff(f, gm)) <= 1e-6
    assert rel_err(db, central_diff(f, bt)) <= 1e-6


def test_gelu_grad(rng):
    x = rng.normal(size=20) * 3
    g = rng.normal(size=20)
    f = lambda: float((T.gelu(x) * g).sum())  # noqa: E731
    assert rel_err(T.gelu_backward(x, g), central_diff(f, x)) <= 1e-6


def test_bilinear_hand_case():
    x = np.array([[1.0, 2], [3, 4]])[..., None]
    want = np.array([[1, 1.25, 1.75, 2], [1.5, 1.75, 2.25, 2.5],
                     [2.5, 2.75, 3.25, 3.5], [3, 3.25, 3.75, 4]])
    assert np.allclose(T.bilinear_upsample(x, 2)[..., 0], want, atol=1e-15)


def test_bilinear_backward_is_adjoint(rng):
    x, y = rng.normal(size=(2, 3, 4, 2)), rng.normal(size=(2, 12, 16, 2))
    lhs = (T.bilinear_upsample(x, 4) * y).sum()
    rhs = (x * T.bilinear_upsample_backward(y, 4)).sum()
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
