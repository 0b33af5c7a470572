"""Losses, Adam, and the per-stage training loops.

Stage 1 fits the coordinate network to the sparse views with the frequency
mask and occlusion penalty; its renders at new poses become a pseudo-dense
dataset; stage 2 fits a fast grid field to that dataset with the plain
reconstruction loss; stage 3 continues the same grid on the sparse views.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Frame, SceneDataset, dequantize, quantize, write_manifest
from .errors import ShapeMismatch
from .field import RadianceField, load_checkpoint
from .geometry import Camera, camera_rays
from .reg_field import occlusion_loss
from .renderer import RenderConfig, render_image, render_rays, render_rays_backward

log = logging.getLogger(__name__)


def reconstruction_loss(pred, gt):
    """Mean squared RGB error over all pixels and channels, and its gradient."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {gt.shape}")
    diff = pred - gt.astype(pred.dtype)
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: Optional[float] = None) -> dict:
    """Bias-corrected Adam update of ``params`` in place; returns ``params``."""
    lr = state.lr if lr is None else lr
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeMismatch(f"gradient for {k!r} has shape {g.shape}, parameter {params[k].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1**t)
    inv_bc2 = 1.0 / (1.0 - b2**t)
    for k, g in grads.items():
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (step_size * m / (np.sqrt(v * inv_bc2) + state.eps)).astype(p.dtype)
    return params


@dataclass
class StageConfig:
    iterations: int = 1000
    rays_per_batch: int = 1024
    lr: float = 5e-3
    # multiplier applied to lr by the final iteration (exponential decay)
    lr_decay: float = 0.1
    occlusion_weight: float = 0.0
    occlusion_k: int = 10
    # fraction of iterations over which frequency bands open; 0 disables masking
    freq_ramp_fraction: float = 0.0
    seed: int = 0
    reset_optimizer: bool = True
    # [[step, resolution], ...] grid upsampling schedule (grid fields only)
    upsample: list = field(default_factory=list)

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_batch < 1:
            raise ValueError("iterations must be >= 0 and rays_per_batch >= 1")
        if min(self.lr, self.occlusion_weight, self.lr_decay) < 0:
            raise ValueError("learning rate and loss weights must be >= 0")


@dataclass
class StageResult:
    field: RadianceField
    losses: list
    optimizer: AdamState


def _ray_table(dataset: SceneDataset, dtype=np.float32):
    os_, ds, cs = [], [], []
    for f in dataset.frames:
        o, d = camera_rays(f.camera, dtype=dtype)
        os_.append(o)
        ds.append(d)
        cs.append(f.image.reshape(-1, 3).astype(dtype))
    return np.concatenate(os_), np.concatenate(ds), np.concatenate(cs)


def batch_loss_and_grads(fld, origins, dirs, targets, rcfg, draws=None, occlusion_weight=0.0, occlusion_k=10):
    """Reconstruction (+ weighted occlusion) loss of one ray batch and its parameter gradients."""
    res = render_rays(fld, origins, dirs, rcfg, draws)
    loss, d_rgb = reconstruction_loss(res.rgb, targets)
    extra = None
    if occlusion_weight > 0:
        occ, occ_grad = occlusion_loss(res.sigmas, occlusion_k)
        loss += occlusion_weight * occ
        extra = occlusion_weight * occ_grad
    return loss, render_rays_backward(fld, res, d_rgb, extra)


def train_stage(
    dataset: SceneDataset,
    fld: RadianceField,
    cfg: StageConfig,
    render_cfg: RenderConfig,
    optimizer: Optional[AdamState] = None,
    label: str = "stage",
    log_every: int = 250,
) -> StageResult:
    """Generic loop: sample rays uniformly with replacement, render, step Adam.

    The occlusion term and frequency mask are active only when the config
    enables them (stage 1 in the standard pipeline).
    """
    if len(dataset) < 1:
        raise ValueError("dataset has no training views")
    dtype = next(iter(fld.params.values())).dtype if fld.params else np.float32
    origins, dirs, colors = _ray_table(dataset, dtype)
    rcfg = replace(render_cfg, background=dataset.background, jitter_mode="stratified")
    rng = np.random.default_rng(cfg.seed)
    if optimizer is None or cfg.reset_optimizer:
        optimizer = AdamState(lr=cfg.lr)
    if cfg.freq_ramp_fraction > 0 and hasattr(fld, "ramp_steps"):
        fld.ramp_steps = max(1, int(round(cfg.freq_ramp_fraction * cfg.iterations)))
    schedule = {int(s): r for s, r in cfg.upsample}
    losses = []
    n_pix = len(colors)
    for it in range(cfg.iterations):
        if it in schedule:
            from .fast_field import upsample

            fld = upsample(fld, schedule[it])
            optimizer = AdamState(lr=cfg.lr)
        fld.set_step(it)
        idx = rng.integers(0, n_pix, size=cfg.rays_per_batch)
        draws = rng.random((cfg.rays_per_batch, rcfg.n_samples), dtype=np.float64).astype(dtype)
        loss, grads = batch_loss_and_grads(
            fld, origins[idx], dirs[idx], colors[idx], rcfg, draws, cfg.occlusion_weight, cfg.occlusion_k
        )
        lr = cfg.lr * cfg.lr_decay ** (it / max(cfg.iterations, 1))
        adam_step(fld.params, grads, optimizer, lr)
        losses.append(loss)
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            log.info("%s it %d/%d loss %.5f", label, it + 1, cfg.iterations, loss)
    fld.set_step(cfg.iterations)
    return StageResult(fld, losses, optimizer)


def train_stage1(sparse: SceneDataset, reg_field: RadianceField, cfg: StageConfig, render_cfg: RenderConfig):
    return train_stage(sparse, reg_field, cfg, render_cfg, label="stage1")


def train_stage2(pseudo: SceneDataset, fast_field: RadianceField, cfg: StageConfig, render_cfg: RenderConfig):
    cfg = replace(cfg, occlusion_weight=0.0, freq_ramp_fraction=0.0)
    return train_stage(pseudo, fast_field, cfg, render_cfg, label="stage2")


def train_stage3(
    sparse: SceneDataset,
    fast_field,
    cfg: StageConfig,
    render_cfg: RenderConfig,
    optimizer: Optional[AdamState] = None,
):
    """Continue training the stage-2 grid on the original sparse views.

    ``fast_field`` may be a field or a checkpoint path; the field is copied,
    never re-initialised.
    """
    if isinstance(fast_field, (str, Path)):
        fast_field, _ = load_checkpoint(fast_field)
        fast_field.astype(np.float32)
    else:
        fast_field = fast_field.copy()
    cfg = replace(cfg, occlusion_weight=0.0, freq_ramp_fraction=0.0)
    return train_stage(sparse, fast_field, cfg, render_cfg, optimizer=optimizer, label="stage3")


def generate_pseudo_views(
    reg_field,
    cameras: list,
    render_cfg: RenderConfig,
    out_dir=None,
    extra_frames: Optional[list] = None,
    threads: int = 1,
) -> SceneDataset:
    """Render one 8-bit image per camera and package them as a pseudo dataset.

    ``reg_field`` may be a field or a checkpoint path. ``extra_frames`` (the
    real sparse views) are appended unchanged when given.
    """
    if isinstance(reg_field, (str, Path)):
        reg_field, _ = load_checkpoint(reg_field)
    if not cameras:
        raise ValueError("need at least one pose")
    rcfg = replace(render_cfg, jitter_mode="midpoint")
    frames = []
    for cam in cameras:
        img = render_image(reg_field, cam, rcfg, threads=threads)
        frames.append(Frame(cam, dequantize(quantize(img))))
    n_rendered = len(frames)
    if extra_frames:
        frames.extend(Frame(f.camera, f.image) for f in extra_frames)
    meta = {"pseudo": True, "n_rendered": n_rendered, "n_real": len(frames) - n_rendered}
    ds = SceneDataset(frames, tuple(render_cfg.background), meta)
    if out_dir is not None:
        write_manifest(ds, out_dir)
    return ds


def render_dataset(fld: RadianceField, cameras: list, render_cfg: RenderConfig, threads: int = 1) -> list:
    rcfg = replace(render_cfg, jitter_mode="midpoint")
    return [render_image(fld, cam, rcfg, threads=threads) for cam in cameras]


def cameras_from_poses(poses, like: Camera) -> list:
    return [Camera(like.width, like.height, like.focal, p) for p in poses]
