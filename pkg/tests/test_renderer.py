import numpy as np
import pytest
from conftest import central_diff, rel_err
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nerfstages.dataset import AnalyticField, AnalyticScene, oracle_render, tri_sphere
from nerfstages.errors import InvalidBounds, NonFiniteInput, ShapeMismatch
from nerfstages.geometry import Camera, Ray, focal_from_fov, look_at
from nerfstages.renderer import (
    RenderConfig,
    composite,
    composite_backward,
    render_image,
    stratified_samples,
)


def _axis_ray():
    return Ray(np.array([0.0, 0.0, 4.0]), np.array([0.0, 0.0, -1.0]))


def test_midpoint_draws_give_equal_bins():
    s = stratified_samples(_axis_ray(), 2.0, 6.0, 8, np.full(8, 0.5))
    np.testing.assert_allclose(s.t_values, 2.0 + (np.arange(8) + 0.5) * 0.5)
    np.testing.assert_allclose(s.deltas, 0.5)
    np.testing.assert_array_equal(s.positions, _axis_ray().origin + s.t_values[:, None] * _axis_ray().direction)


def test_strata_bound(rng):
    draws = rng.random(64)
    s = stratified_samples(_axis_ray(), 2.0, 6.0, 64, draws)
    width = 4.0 / 64
    centers = 2.0 + (np.arange(64) + 0.5) * width
    assert np.abs(s.t_values - centers).max() <= width / 2
    assert np.all(np.diff(s.t_values) > 0)
    assert np.all(s.deltas >= 0)


@given(arrays(np.float64, 16, elements=st.floats(0, 1, exclude_max=True)))
def test_any_draws_increasing(draws):
    s = stratified_samples(_axis_ray(), 2.0, 6.0, 16, draws)
    assert np.all(np.diff(s.t_values) > 0)
    assert np.all(s.deltas >= 0)


def test_invalid_bounds():
    with pytest.raises(InvalidBounds):
        stratified_samples(_axis_ray(), 6.0, 2.0, 8, np.full(8, 0.5))
    with pytest.raises(InvalidBounds):
        RenderConfig(near=3.0, far=3.0)


def test_empty_medium_is_background():
    out = composite(np.zeros(10), np.full((10, 3), 0.3), np.full(10, 0.1), (0.2, 0.4, 0.6))
    np.testing.assert_array_equal(out.pixel_color, [0.2, 0.4, 0.6])
    np.testing.assert_array_equal(out.weights, 0)
    assert out.residual_transmittance == 1.0


def test_single_sample_half_opacity():
    out = composite([1.0], [[1.0, 0.0, 0.0]], [np.log(2.0)], (0, 0, 0))
    np.testing.assert_allclose(out.pixel_color, [0.5, 0, 0], atol=1e-15)
    np.testing.assert_allclose(out.weights, [0.5])


def homogeneous_error(n, sigma=1.3, near=2.0, far=6.0):
    c = np.array([0.8, 0.3, 0.1])
    deltas = np.full(n, (far - near) / n)
    out = composite(np.full(n, sigma), np.tile(c, (n, 1)), deltas, (0, 0, 0))
    exact = c * (1 - np.exp(-sigma * (far - near)))
    return np.abs(out.pixel_color - exact).max() / np.abs(exact).max()


def test_homogeneous_medium_converges():
    assert homogeneous_error(256) < 1e-3
    # constant density telescopes: the discrete sum is exact for any n
    for n in (2, 17, 1024):
        assert homogeneous_error(n) < 1e-12


def test_composite_errors():
    with pytest.raises(ShapeMismatch):
        composite(np.ones(4), np.ones((5, 3)), np.ones(4))
    with pytest.raises(NonFiniteInput):
        composite(np.array([1.0, np.nan]), np.ones((2, 3)), np.ones(2))
    with pytest.raises(NonFiniteInput):
        composite(np.array([1.0, -0.5]), np.ones((2, 3)), np.ones(2))
    with pytest.raises(ShapeMismatch):
        composite_backward(np.ones(4), np.ones((4, 3)), np.ones(4), (1, 1, 1), np.ones(2))


def test_color_gradient_is_weight(rng):
    s, c, d = rng.uniform(0, 3, 8), rng.random((8, 3)), rng.uniform(0.05, 0.5, 8)
    up = rng.normal(size=3)
    _, dc = composite_backward(s, c, d, (1, 1, 1), up)
    w = composite(s, c, d).weights
    np.testing.assert_array_equal(dc, w[:, None] * up[None, :])


def test_zero_density_gradient_limit(rng):
    c = rng.random((8, 3))
    d = rng.uniform(0.05, 0.5, 8)
    bg = np.array([1.0, 0.5, 0.0])
    up = rng.normal(size=3)
    s = np.zeros(8)
    ds, _ = composite_backward(s, c, d, bg, up)
    np.testing.assert_allclose(ds, d * ((c - bg) @ up), rtol=1e-12, atol=1e-15)
    # one-sided differences: density cannot go negative
    eps = 1e-7
    base = composite(s, c, d, bg).pixel_color @ up
    fd = np.empty(8)
    for i in range(8):
        sp = s.copy()
        sp[i] = eps
        fd[i] = (composite(sp, c, d, bg).pixel_color @ up - base) / eps
    assert rel_err(ds, fd) < 1e-5


def composite_fd_error(seed):
    rng = np.random.default_rng(seed)
    n = 8
    s = rng.uniform(0.01, 3.0, n)
    c = rng.random((n, 3))
    d = rng.uniform(0.05, 0.5, n)
    bg = rng.random(3)
    up = rng.normal(size=3)

    def loss():
        return float(composite(s, c, d, bg).pixel_color @ up)

    ds, dc = composite_backward(s, c, d, bg, up)
    fs = central_diff(loss, s, eps=1e-4)
    fc = central_diff(loss, c, eps=1e-4)
    return max(rel_err(ds, fs), rel_err(dc, fc))


def test_composite_backward_fd_100_seeds():
    worst = max(composite_fd_error(seed) for seed in range(100))
    assert worst < 1e-4


def test_composite_batched_matches_single(rng):
    s, c, d = rng.uniform(0, 2, (5, 8)), rng.random((5, 8, 3)), rng.uniform(0.1, 0.3, (5, 8))
    up = rng.normal(size=(5, 3))
    out = composite(s, c, d)
    ds, dc = composite_backward(s, c, d, (1, 1, 1), up)
    for i in range(5):
        one = composite(s[i], c[i], d[i])
        np.testing.assert_allclose(out.pixel_color[i], one.pixel_color, rtol=1e-14)
        ds1, dc1 = composite_backward(s[i], c[i], d[i], (1, 1, 1), up[i])
        np.testing.assert_allclose(ds[i], ds1, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(dc[i], dc1, rtol=1e-12, atol=1e-15)


densities = arrays(np.float64, 12, elements=st.floats(0, 50))


@given(densities, st.floats(0.001, 1.0))
def test_weights_sum_and_monotone_transmittance(s, delta):
    out = composite(s, np.full((12, 3), 0.5), np.full(12, delta))
    assert abs(out.weights.sum() + out.residual_transmittance - 1) < 1e-5
    assert np.all(out.weights >= 0)
    assert 0 <= out.residual_transmittance <= 1
    assert np.all(np.diff(out.transmittance) <= 0)


@given(densities, st.integers(0, 11), st.floats(0, 10))
def test_more_density_never_more_transmittance(s, i, bump):
    d = np.full(12, 0.1)
    c = np.full((12, 3), 0.5)
    before = composite(s, c, d).residual_transmittance
    s2 = s.copy()
    s2[i] += bump
    assert composite(s2, c, d).residual_transmittance <= before


def _camera(res=16):
    return Camera(res, res, focal_from_fov(res, 0.6911112), look_at((3.0, 1.0, 2.0), (0, 0, 0)))


def test_empty_field_renders_background():
    cfg = RenderConfig(n_samples=16, background=(0.1, 0.7, 0.3))
    img = render_image(AnalyticField(AnalyticScene((), "empty")), _camera(), cfg)
    np.testing.assert_allclose(img, np.broadcast_to([0.1, 0.7, 0.3], img.shape), atol=1e-7)


def test_render_deterministic_and_threaded():
    fld = AnalyticField(tri_sphere())
    cfg = RenderConfig(n_samples=32, chunk=50)
    a = render_image(fld, _camera(), cfg)
    b = render_image(fld, _camera(), cfg)
    c = render_image(fld, _camera(), cfg, threads=3)
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1


def test_render_matches_oracle_small():
    scene = tri_sphere()
    cam = _camera(24)
    img = render_image(AnalyticField(scene), cam, RenderConfig(n_samples=512), dtype=np.float64)
    ref = oracle_render(scene, cam, 4096)
    assert np.abs(img - ref).max() < 2 / 255
