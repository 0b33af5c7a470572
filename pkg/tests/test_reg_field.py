import numpy as np
import pytest
from conftest import central_diff, rel_err
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nerfstages.errors import CacheMismatch, MaskLengthMismatch, NonFiniteInput, TooFewSamples
from nerfstages.reg_field import (
    CoordinateNetwork,
    EncodingConfig,
    frequency_mask,
    occlusion_loss,
    positional_encoding,
    sigmoid,
)
from nerfstages.renderer import RenderConfig
from nerfstages.trainer import batch_loss_and_grads


def test_encoding_at_zero():
    mask = np.array([0.3, 1.0, 0.0, 0.7])
    enc = positional_encoding(np.zeros(3), 4, mask)
    bands = enc[3:].reshape(4, 2, 3)
    np.testing.assert_array_equal(bands[:, 0], 0)
    np.testing.assert_array_equal(bands[:, 1], np.repeat(mask[:, None], 3, axis=1))


def test_encoding_hand_values():
    m = np.array([0.4, 0.9])
    enc = positional_encoding(np.array([0.25]), 2, m, include_identity=False)
    h = np.sqrt(2) / 2
    np.testing.assert_allclose(enc, [h * m[0], h * m[0], m[1], 0.0], atol=1e-15)


def test_encoding_length_and_mask_errors():
    cfg = EncodingConfig(L_pos=5, L_dir=0)
    assert positional_encoding(np.ones((2, 3)), 5).shape == (2, cfg.pos_dim())
    assert positional_encoding(np.ones(3), 0).shape == (cfg.dir_dim(),)
    assert positional_encoding(np.ones(3), 2, include_identity=False).shape == (12,)
    with pytest.raises(MaskLengthMismatch):
        positional_encoding(np.ones(3), 4, np.ones(3))
    with pytest.raises(ValueError):
        EncodingConfig(L_pos=0)


@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)), st.integers(1, 8))
def test_all_ones_mask_is_unmasked(x, L):
    a = positional_encoding(x, L)
    b = positional_encoding(x, L, np.ones(L))
    assert np.array_equal(a, b)


def test_mask_endpoints():
    m0 = frequency_mask(0, 100, 6)
    assert m0[0] == 0 and np.all(m0[1:] == 0)
    assert np.all(frequency_mask(100, 100, 6) == 1)
    assert np.all(frequency_mask(10**6, 100, 6) == 1)


def test_mask_half_ramp_eight_bands():
    m = frequency_mask(50, 100, 8)
    np.testing.assert_array_equal(m[:4], 1)
    np.testing.assert_array_equal(m[5:], 0)
    # the ramp position sits exactly on the boundary of band 4, whose weight is 0
    assert 0 <= m[4] <= 1
    m = frequency_mask(55, 100, 8)
    assert 0 < m[4] < 1
    assert abs(m[4] - 0.4) < 1e-12


@given(st.integers(1, 500), st.integers(1, 12), st.floats(0, 1), st.floats(0, 1))
def test_mask_monotone_and_bounded(T, L, a, b):
    t1, t2 = sorted((a * 1.2 * T, b * 1.2 * T))
    m1, m2 = frequency_mask(t1, T, L), frequency_mask(t2, T, L)
    assert np.all((m1 >= 0) & (m1 <= 1))
    assert np.all(m1 <= m2)
    assert m1[0] >= min(1.0, L * t1 / T) - 1e-12


def test_occlusion_loss_examples():
    assert occlusion_loss(np.zeros((3, 12)), 10)[0] == 0
    loss, grad = occlusion_loss(np.array([4.0, 2.0, 9.0, 9.0]), 2)
    assert loss == 3.0
    np.testing.assert_array_equal(grad, [[0.5, 0.5, 0, 0]])
    _, grad = occlusion_loss(np.ones((5, 12)), 4)
    np.testing.assert_allclose(grad[:, :4], 1 / 20)
    np.testing.assert_array_equal(grad[:, 4:], 0)
    with pytest.raises(TooFewSamples):
        occlusion_loss(np.ones((2, 3)), 4)


def _net(seed=0, hidden=(16, 16, 16), **kw):
    return CoordinateNetwork(hidden=hidden, L_pos=3, L_dir=1, seed=seed, dtype="float64", **kw)


def test_outputs_in_range_for_many_inputs(rng):
    net = _net(hidden=(32, 32))
    x = rng.uniform(-20, 20, (10_000, 3))
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    s, c, _ = net.query(x, d)
    assert np.all(np.isfinite(s)) and np.all(s >= 0)
    assert np.all((c >= 0) & (c <= 1))


def test_zero_bias_smoke_and_purity(rng):
    net = _net()
    x, d = rng.normal(size=(6, 3)), np.tile([0, 0, 1.0], (6, 1))
    s1, c1, _ = net.query(x, d)
    s2, c2, _ = net.query(x, d)
    assert np.all(s1 > 0) and np.all(np.isfinite(s1))
    assert np.array_equal(s1, s2) and np.array_equal(c1, c2)


def test_query_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        _net().query(np.array([[0.0, np.inf, 0.0]]), np.array([[0, 0, 1.0]]))


def test_zero_upstream_zero_grads(rng):
    net = _net()
    _, _, cache = net.query(rng.normal(size=(4, 3)), np.tile([1.0, 0, 0], (4, 1)))
    g = net.backward(cache, np.zeros(4), np.zeros((4, 3)))
    assert set(g) == set(net.params)
    assert all(np.all(v == 0) for v in g.values())


def test_cache_mismatch(rng):
    a, b = _net(0), _net(1)
    _, _, cache = a.query(rng.normal(size=(4, 3)), np.tile([1.0, 0, 0], (4, 1)))
    with pytest.raises(CacheMismatch):
        b.backward(cache, np.ones(4), np.ones((4, 3)))
    with pytest.raises(CacheMismatch):
        a.backward(cache, np.ones(5), np.ones((5, 3)))


def test_head_gradients_are_outer_products(rng):
    net = _net(hidden=(5,))
    x, d = rng.normal(size=(1, 3)), np.array([[0.0, 0.6, 0.8]])
    s, c, cache = net.query(x, d)
    ds, dc = np.array([0.7]), np.array([[0.2, -1.0, 0.5]])
    g = net.backward(cache, ds, dc)
    h = cache.inputs[-1][0]
    dz_s = ds * sigmoid(cache.z_sigma)
    np.testing.assert_array_equal(g["W_sigma"], np.outer(h, dz_s))
    feat = np.concatenate([h, cache.enc_d[0]])
    dz_c = dc[0] * c[0] * (1 - c[0])
    np.testing.assert_allclose(g["W_rgb"], np.outer(feat, dz_c), rtol=1e-15, atol=1e-18)


def test_parameter_count():
    net = _net(hidden=(8, 4))
    enc = EncodingConfig(3, 1)
    expected = (enc.pos_dim() * 8 + 8) + (8 * 4 + 4) + (4 + 1) + ((4 + enc.dir_dim()) * 3 + 3)
    assert net.n_params() == expected


def _jitter_biases(net, rng):
    # zero biases can put a preactivation exactly on a ReLU kink, where no derivative exists
    for k, v in net.params.items():
        if k.startswith("b"):
            v += rng.uniform(-0.1, 0.1, v.shape)


def network_fd_error(seed):
    rng = np.random.default_rng(seed)
    net = _net(seed, ramp_steps=10, mask_directions=True)
    net.set_step(4)  # partially open bands exercise the mask
    _jitter_biases(net, rng)
    x = rng.uniform(-1, 1, (4, 3))
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    us, uc = rng.normal(size=4), rng.normal(size=(4, 3))

    def loss():
        s, c, _ = net.query(x, d)
        return float(s @ us + np.sum(c * uc))

    _, _, cache = net.query(x, d)
    g = net.backward(cache, us, uc)
    return max(rel_err(g[k], central_diff(loss, p, eps=1e-6)) for k, p in net.params.items())


def test_network_backward_fd_20_seeds():
    assert max(network_fd_error(s) for s in range(20)) < 1e-4


def pipeline_fd_error(seed):
    """Reconstruction + occlusion loss through render and network, 2 rays x 8 samples."""
    rng = np.random.default_rng(seed)
    net = CoordinateNetwork(hidden=(8, 8), L_pos=2, L_dir=1, ramp_steps=6, seed=seed, dtype="float64")
    net.set_step(3)
    _jitter_biases(net, rng)
    origins = np.array([[0.0, 0.0, 4.0], [4.0, 0.0, 0.5]])
    dirs = rng.normal(size=(2, 3)) * 0.1 + np.array([[0, 0, -1.0], [-1.0, 0, 0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = rng.random((2, 3))
    cfg = RenderConfig(near=2.0, far=6.0, n_samples=8, background=(1, 1, 1), bbox=None)
    draws = rng.random((2, 8))

    def loss():
        return batch_loss_and_grads(net, origins, dirs, target, cfg, draws, 0.5, 3)[0]

    _, g = batch_loss_and_grads(net, origins, dirs, target, cfg, draws, 0.5, 3)
    return max(rel_err(g[k], central_diff(loss, p, eps=1e-6)) for k, p in net.params.items())


def test_end_to_end_micro_pipeline_fd():
    assert max(pipeline_fd_error(s) for s in range(20)) < 1e-3


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_parameters_share_dtype(dtype):
    net = CoordinateNetwork(hidden=(4, 4), dtype=dtype)
    assert {v.dtype for v in net.params.values()} == {np.dtype(dtype)}
