import numpy as np
import pytest
from conftest import central_diff, rel_err

from nerfstages.dataset import AnalyticField, load_manifest, quantize, synth_dataset, tri_sphere
from nerfstages.errors import ShapeMismatch
from nerfstages.fast_field import VMGrid
from nerfstages.field import dumps_checkpoint, save_checkpoint
from nerfstages.geometry import sample_poses_sphere_cap
from nerfstages.metrics import psnr
from nerfstages.reg_field import CoordinateNetwork
from nerfstages.renderer import RenderConfig, render_image
from nerfstages.trainer import (
    AdamState,
    StageConfig,
    adam_step,
    cameras_from_poses,
    generate_pseudo_views,
    reconstruction_loss,
    render_dataset,
    train_stage1,
    train_stage2,
    train_stage3,
)

RCFG = RenderConfig(n_samples=32)


def test_reconstruction_loss_examples():
    x = np.random.default_rng(0).random((5, 3))
    loss, g = reconstruction_loss(x, x)
    assert loss == 0 and np.all(g == 0)
    loss, _ = reconstruction_loss(np.full((1, 3), 0.6), np.full((1, 3), 0.5))
    assert loss == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(np.ones((2, 3)), np.ones((3, 3)))


def test_reconstruction_gradient_fd(rng):
    for _ in range(10):
        pred, gt = rng.random((7, 3)), rng.random((7, 3))
        _, g = reconstruction_loss(pred, gt)
        fd = central_diff(lambda: reconstruction_loss(pred, gt)[0], pred, eps=1e-6)
        assert rel_err(g, fd) < 1e-6


def test_adam_zero_grad_fresh_state_no_move():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": np.array([3.0])}
    st = AdamState(lr=0.05)
    adam_step(p, {"w": np.array([1.0])}, st)
    assert p["w"][0] - 3.0 == pytest.approx(-0.05, rel=1e-7)
    assert st.step == 1


def test_adam_zero_grad_still_decays_prior_moments():
    p = {"w": np.array([0.0])}
    st = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([1.0])}, st)
    before = p["w"].copy()
    adam_step(p, {"w": np.array([0.0])}, st)
    assert p["w"][0] < before[0]
    np.testing.assert_allclose(st.m["w"], [0.1 * 0.9])


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(rays_per_batch=0)
    with pytest.raises(ValueError):
        StageConfig(lr=-1)


@pytest.fixture(scope="module")
def one_view():
    return synth_dataset(tri_sphere(), 1, resolution=32, seed=0, n_quadrature=256)


@pytest.fixture(scope="module")
def four_views():
    return synth_dataset(tri_sphere(), 4, resolution=24, seed=1, n_quadrature=256)


def _train_psnr(fld, ds):
    preds = render_dataset(fld, ds.cameras, RCFG)
    return float(np.mean([psnr(p, g) for p, g in zip(preds, ds.images)]))


def _net(seed=0):
    return CoordinateNetwork(hidden=(64, 64, 64, 64), seed=seed, dtype="float32")


def test_stage1_smoke_improves_training_psnr(one_view):
    net = _net()
    before = _train_psnr(net, one_view)
    cfg = StageConfig(iterations=200, rays_per_batch=256, lr=5e-3, occlusion_weight=0.01, freq_ramp_fraction=0.9)
    res = train_stage1(one_view, net, cfg, RCFG)
    after = _train_psnr(res.field, one_view)
    assert after >= before + 3.0
    assert np.mean(res.losses[-10:]) <= res.losses[0]


def test_zero_iterations_keep_initialisation(one_view):
    net = _net(3)
    init = dumps_checkpoint(net)
    res = train_stage1(one_view, net, StageConfig(iterations=0), RCFG)
    assert dumps_checkpoint(res.field) == init
    assert res.losses == []


def test_fixed_seed_reproducible(one_view):
    cfg = StageConfig(iterations=15, rays_per_batch=64, seed=5, occlusion_weight=0.01, freq_ramp_fraction=0.5)
    a = train_stage1(one_view, _net(), cfg, RCFG)
    b = train_stage1(one_view, _net(), cfg, RCFG)
    assert a.losses == b.losses
    assert dumps_checkpoint(a.field) == dumps_checkpoint(b.field)


def test_pseudo_views_at_training_poses(one_view, tmp_path):
    net = _net()
    ds = generate_pseudo_views(net, one_view.cameras, RCFG, tmp_path)
    img = render_image(net, one_view.cameras[0], RCFG)
    assert np.array_equal(quantize(ds.images[0]), quantize(img))
    assert ds.pseudo and ds.metadata["pseudo"] is True
    path = save_checkpoint(net, tmp_path / "ck")
    again = generate_pseudo_views(path, one_view.cameras, RCFG)
    assert np.array_equal(again.images, ds.images)


def test_two_hundred_pseudo_views_round_trip(tmp_path):
    scene = AnalyticField(tri_sphere())
    like = synth_dataset(tri_sphere(), 1, resolution=12, n_quadrature=64).cameras[0]
    cams = cameras_from_poses(sample_poses_sphere_cap(200, 4.0, seed=11), like)
    ds = generate_pseudo_views(scene, cams, RenderConfig(n_samples=16), tmp_path)
    assert len(ds) == 200
    back = load_manifest(tmp_path)
    assert len(back) == 200 and back.pseudo
    assert np.array_equal(back.images, ds.images)
    for a, b in zip(back.cameras, cams):
        assert np.abs(a.pose - b.pose).max() < 1e-9


def test_pseudo_views_append_real_frames(one_view):
    ds = generate_pseudo_views(_net(), one_view.cameras * 2, RCFG, extra_frames=one_view.frames)
    assert len(ds) == 3
    assert ds.metadata["n_rendered"] == 2 and ds.metadata["n_real"] == 1
    assert np.array_equal(ds.images[2], one_view.images[0])


def _vm(seed=0):
    return VMGrid(resolution=24, density_rank=4, app_rank=4, app_dim=8, seed=seed, dtype="float32")


@pytest.fixture(scope="module")
def stage2_result(four_views):
    cfg = StageConfig(iterations=300, rays_per_batch=256, lr=0.02, seed=2)
    return train_stage2(four_views, _vm(), cfg, RCFG)


def test_stage2_loss_halves(stage2_result):
    assert np.mean(stage2_result.losses[-20:]) <= 0.5 * stage2_result.losses[0]


def test_stage2_zero_iterations(four_views):
    g = _vm(1)
    init = dumps_checkpoint(g)
    assert dumps_checkpoint(train_stage2(four_views, g, StageConfig(iterations=0), RCFG).field) == init


def test_stage3_zero_iterations_is_continuation(four_views, stage2_result, tmp_path):
    res = train_stage3(four_views, stage2_result.field, StageConfig(iterations=0), RCFG)
    assert dumps_checkpoint(res.field) == dumps_checkpoint(stage2_result.field)
    assert res.field is not stage2_result.field
    path = save_checkpoint(stage2_result.field, tmp_path / "s2")
    res = train_stage3(four_views, path, StageConfig(iterations=0), RCFG)
    assert dumps_checkpoint(res.field) == dumps_checkpoint(stage2_result.field)


def test_stage3_improves_sparse_fit(four_views, stage2_result):
    # stage 2 learned from a coarse pseudo set; refine on the real views
    sparse = four_views.subset([0, 1])
    before = _train_psnr(stage2_result.field, sparse)
    cfg = StageConfig(iterations=150, rays_per_batch=256, lr=0.002, seed=3)
    a = train_stage3(sparse, stage2_result.field, cfg, RCFG)
    b = train_stage3(sparse, stage2_result.field, cfg, RCFG)
    assert _train_psnr(a.field, sparse) > before
    assert a.losses == b.losses


def test_upsample_schedule(four_views):
    g = VMGrid(resolution=8, density_rank=2, app_rank=2, app_dim=4, seed=0, dtype="float32")
    cfg = StageConfig(iterations=6, rays_per_batch=32, upsample=[[3, 12]])
    res = train_stage2(four_views, g, cfg, RCFG)
    assert res.field.resolution == (12, 12, 12)
    assert len(res.losses) == 6
