import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmc import _kernels_py, kernels
from cmc import nn
from cmc.nn import Network, activation, conv2d, dense, meanpool, reshape, upsample


def test_dense_identity_forward():
    net = Network((3,), [dense(3)])
    net.set_params([np.eye(3), np.zeros(3)])
    np.testing.assert_array_equal(net(np.array([[1.0, 2.0, 3.0]])), [[1.0, 2.0, 3.0]])


def test_conv_identity_kernel():
    net = Network((5, 6, 1), [conv2d(1, kernel=1)])
    net.set_params([np.ones((1, 1, 1, 1)), np.zeros(1)])
    img = np.random.default_rng(0).random((2, 5, 6, 1))
    np.testing.assert_array_equal(net(img), img)


def test_two_layer_matches_hand_evaluation():
    rng = np.random.default_rng(1)
    net = Network((4,), [dense(5), activation("tanh"), dense(2)], seed=3)
    x = rng.standard_normal((7, 4))
    W1, b1, W2, b2 = net.params
    expected = np.empty((7, 2))
    for n in range(7):
        h = [np.tanh(sum(x[n, i] * W1[i, j] for i in range(4)) + b1[j]) for j in range(5)]
        for k in range(2):
            expected[n, k] = sum(h[j] * W2[j, k] for j in range(5)) + b2[k]
    np.testing.assert_allclose(net(x), expected, rtol=0, atol=1e-12)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    net = Network((5, 4, 2), [conv2d(3, kernel=3)], seed=4)
    net.params[1][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 5, 4, 2))
    W, b = net.params
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    expected = np.zeros((2, 5, 4, 3))
    for n in range(2):
        for i in range(5):
            for j in range(4):
                for f in range(3):
                    expected[n, i, j, f] = b[f] + np.sum(xp[n, i:i + 3, j:j + 3, :] * W[:, :, :, f])
    np.testing.assert_allclose(net(x), expected, atol=1e-12)


def test_shape_mismatch_names_layer():
    net = Network((4,), [dense(2)])
    with pytest.raises(nn.ShapeError, match="Dense#0"):
        net(np.zeros((1, 3)))


def test_backward_without_forward_rejected():
    net = Network((4,), [dense(2)])
    with pytest.raises(RuntimeError):
        net.backward(None, np.zeros((1, 2)))


def test_zero_gradient_at_mse_minimum():
    net = Network((3,), [dense(2)], seed=1)
    x = np.ones((4, 3))
    y, caches = net.forward(x)
    loss, g = nn.mse(y, y.copy())
    grads, gx = net.backward(caches, g)
    assert loss == 0.0
    assert all(np.all(gr == 0) for gr in grads) and np.all(gx == 0)


def test_dense_weight_gradient_is_outer_product():
    net = Network((3,), [dense(2)], seed=5)
    x = np.array([[1.0, -2.0, 0.5]])
    g = np.array([[0.3, -1.1]])
    _, caches = net.forward(x)
    (gW, gb), gx = net.backward(caches, g)
    for i in range(3):
        for j in range(2):
            assert gW[i, j] == pytest.approx(g[0, j] * x[0, i], abs=1e-15)
    np.testing.assert_allclose(gb, g[0])
    np.testing.assert_allclose(gx, g @ net.params[0].T)


@pytest.mark.parametrize(
    "shape,specs,tol",
    [
        ((4,), [dense(3)], 1e-8),
        ((5,), [dense(6), activation("tanh"), dense(4), activation("relu"), dense(2)], 1e-4),
        ((6, 6, 2), [conv2d(3), activation("relu"), meanpool(2), conv2d(2), reshape(18), dense(3)], 1e-4),
        ((4,), [dense(8), reshape(2, 2, 2), upsample(2), conv2d(2), activation("tanh")], 1e-4),
        ((5, 4, 1), [conv2d(2, kernel=2, padding=False), activation("tanh")], 1e-4),
    ],
)
def test_finite_difference_check(shape, specs, tol):
    net = Network(shape, specs, seed=11)
    for p in net.params[1::2]:
        p[...] = np.random.default_rng(3).uniform(-0.1, 0.1, p.shape)
    x = np.random.default_rng(7).standard_normal((2,) + shape)
    assert nn.finite_diff_check(net, x, 1e-5) < tol


def test_finite_difference_detects_sign_flip():
    net = Network((5,), [dense(4), activation("tanh"), dense(2)], seed=2)
    x = np.random.default_rng(0).standard_normal((3, 5))

    def broken(caches, gy):
        grads, gx = net.backward(caches, gy)
        grads[0] = grads[0].copy()
        grads[0][0, 0] = -grads[0][0, 0]
        return grads, gx

    assert nn.finite_diff_check(net, x, 1e-5, backward=broken) > 1e-2


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6), st.integers(1, 3), st.integers(1, 3),
       st.sampled_from([1, 2, 3]))
def test_shapes_round_trip(n, h, w, c, f, k):
    net = Network((h, w, c), [conv2d(f, kernel=k), activation("relu")], seed=0)
    x = np.random.default_rng(0).standard_normal((n, h, w, c))
    y, caches = net.forward(x)
    assert y.shape == (n, h, w, f)
    _, gx = net.backward(caches, np.ones_like(y))
    assert gx.shape == x.shape


def test_compiled_and_fallback_kernels_agree():
    rng = np.random.default_rng(9)
    xp = rng.standard_normal((3, 7, 6, 2))
    w = rng.standard_normal((3, 3, 2, 4))
    b = rng.standard_normal(4)
    gy = rng.standard_normal((3, 5, 4, 4))
    np.testing.assert_allclose(kernels.conv2d_forward(xp, w, b), _kernels_py.conv2d_forward(xp, w, b), atol=1e-12)
    for a, c in zip(kernels.conv2d_backward(xp, w, gy), _kernels_py.conv2d_backward(xp, w, gy)):
        np.testing.assert_allclose(a, c, atol=1e-12)
    for impl in (kernels, _kernels_py):
        gx, gw, gb = impl.conv2d_backward(xp, w, gy, False)
        full = impl.conv2d_backward(xp, w, gy)
        assert gx is None
        np.testing.assert_array_equal(gw, full[1])
        np.testing.assert_array_equal(gb, full[2])


def test_skipping_input_grad_keeps_param_grads():
    net = Network((8, 8, 2), [meanpool(2), conv2d(3), activation("relu"), reshape(48), dense(2)], seed=4)
    x = np.random.default_rng(5).random((3, 8, 8, 2))
    y, caches = net.forward(x)
    full, gx = net.backward(caches, np.ones_like(y))
    part, none = net.backward(caches, np.ones_like(y), input_grad=False)
    assert gx.shape == x.shape and none is None
    for a, b in zip(full, part):
        np.testing.assert_array_equal(a, b)


def test_pool_and_upsample_match_reference():
    x = np.random.default_rng(6).random((2, 6, 4, 3))
    pooled = Network((6, 4, 3), [meanpool(2)])(x)
    np.testing.assert_allclose(pooled, x.reshape(2, 3, 2, 2, 2, 3).mean(axis=(2, 4)), atol=1e-15)
    up = Network((6, 4, 3), [upsample(3)])(x)
    np.testing.assert_array_equal(up, np.repeat(np.repeat(x, 3, axis=1), 3, axis=2))


def test_same_seed_same_params():
    specs = [conv2d(3), activation("relu"), reshape(48), dense(2)]
    a, b = Network((4, 4, 1), specs, seed=42), Network((4, 4, 1), specs, seed=42)
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p, q)
    c = Network((4, 4, 1), specs, seed=43)
    assert not np.array_equal(a.params[0], c.params[0])


def test_init_is_fan_in_uniform_with_zero_bias():
    net = Network((16,), [dense(200)], seed=0)
    W, b = net.params
    assert np.all(np.abs(W) <= 0.25) and np.all(b == 0)


def test_mse_values():
    loss, g = nn.mse(np.array([1.0, 1.0]), np.array([0.0, 0.0]))
    assert loss == 1.0
    np.testing.assert_array_equal(g, [1.0, 1.0])
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    loss, g = nn.mse(p, t)
    assert loss == pytest.approx(sum((p.flat[i] - t.flat[i]) ** 2 for i in range(12)) / 12, abs=1e-12)
    with pytest.raises(nn.ShapeError):
        nn.mse(np.zeros(2), np.zeros(3))


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    state = nn.AdamState.like(p)
    nn.adam_step(p, [np.zeros(2)], state, 1e-3)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    np.testing.assert_array_equal(state.m[0], 0)
    assert state.t == 1


def test_adam_first_step_is_minus_lr_sign():
    p = [np.array([0.0])]
    state = nn.AdamState.like(p)
    nn.adam_step(p, [np.array([5.0])], state, 1e-3)
    assert p[0][0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_descends_quadratic():
    p = [np.array([1.0])]
    state = nn.AdamState.like(p)
    trace = []
    for _ in range(100):
        nn.adam_step(p, [2 * p[0]], state, 0.1)
        trace.append(abs(p[0][0]))
    assert trace[-1] < 1.0
    assert np.mean(trace[50:]) < np.mean(trace[:50])


def test_adam_rejects_non_finite():
    p = [np.zeros(2)]
    with pytest.raises(nn.NonFiniteError):
        nn.adam_step(p, [np.array([np.nan, 0.0])], nn.AdamState.like(p), 1e-3)


def test_checkpoint_round_trip(tmp_path):
    net = Network((4, 4, 1), [conv2d(2), activation("relu"), reshape(32), dense(3)], seed=8)
    net.params[1][:] = [0.25, -0.5]
    path = tmp_path / "net.json"
    nn.save_checkpoint(net, path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"version", "spec", "seed", "params"}
    loaded = nn.load_checkpoint(path)
    for p, q in zip(net.params, loaded.params):
        assert np.array_equal(p, q)
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        nn.load_checkpoint(path)


def test_soft_update_arithmetic():
    src = Network((2,), [dense(2)], seed=0)
    tgt = src.copy()
    src.set_params([np.ones((2, 2)), np.ones(2)])
    tgt.set_params([np.zeros((2, 2)), np.zeros(2)])
    nn.soft_update(tgt, src, 0.1)
    np.testing.assert_allclose(tgt.params[0], 0.1)
