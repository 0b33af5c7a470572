"""Three-stage run orchestration and the on-disk run layout.

Output directory::

    report.json          PipelineReport (see README for the schema)
    table.txt            stage comparison table
    data/train, data/test  the sparse and held-out datasets (manifests)
    stage{1,2,3}/checkpoint, stage{N}/loss.csv, stage{N}/metrics.csv
    pseudo/              pseudo-dense dataset rendered by the stage-1 model
    renders/stage{N}/test_###.png
    baseline/            fast field trained on the sparse views alone (optional)
"""

from __future__ import annotations

import logging
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .dataset import (
    builtin_scene,
    load_manifest,
    make_sparse_split,
    oracle_render,
    quantize,
    synth_dataset,
    write_manifest,
)
from .field import field_class, save_checkpoint
from .geometry import sample_poses_sphere_cap
from .metrics import emit_report, evaluate_images, psnr
from .renderer import RenderConfig
from .trainer import (
    StageConfig,
    cameras_from_poses,
    generate_pseudo_views,
    render_dataset,
    train_stage,
    train_stage1,
    train_stage2,
    train_stage3,
)

log = logging.getLogger(__name__)

# Published stage-wise test PSNR (Blender, 4 input views); documentation only.
REFERENCE_TREND = {
    "dataset": "Blender",
    "views": 4,
    "psnr_db": [20.37, 20.86, 22.14],
    "note": "full-scale published values; not reproducible at desk scale",
}
TIMING_KEYS = ("wall_seconds", "total_seconds")


def build_field(settings, seed: int, dtype="float32"):
    cls = field_class(settings.kind)
    opts = dict(settings.options)
    if "seed" in cls.__init__.__code__.co_varnames:
        opts.setdefault("seed", seed)
    opts.setdefault("dtype", dtype)
    try:
        return cls(**opts)
    except TypeError as exc:
        raise ValueError(f"bad options for field kind {settings.kind!r}: {exc}") from exc


def render_config(cfg: RunConfig, eval_mode: bool = False) -> RenderConfig:
    r = cfg.render
    return RenderConfig(
        near=r.near,
        far=r.far,
        n_samples=r.eval_samples if eval_mode else r.n_samples,
        background=tuple(r.background),
        jitter_mode="midpoint" if eval_mode else "stratified",
        bbox=None if r.bbox is None else (tuple(r.bbox[0]), tuple(r.bbox[1])),
    )


def stage_config(cfg: RunConfig, n: int, iterations=None) -> StageConfig:
    s = getattr(cfg, f"stage{n}")
    lr = cfg.stage3_lr() if n == 3 else s.lr if s.lr is not None else (5e-3 if n == 1 else 0.02)
    return StageConfig(
        iterations=s.iterations if iterations is None else iterations,
        rays_per_batch=s.rays_per_batch,
        lr=lr,
        lr_decay=s.lr_decay,
        occlusion_weight=s.occlusion_weight if n == 1 else 0.0,
        occlusion_k=s.occlusion_k,
        freq_ramp_fraction=s.freq_ramp_fraction if n == 1 else 0.0,
        seed=cfg.seed * 1000 + n,
        reset_optimizer=s.reset_optimizer,
        upsample=[list(u) for u in s.upsample],
    )


def prepare_datasets(cfg: RunConfig, out_dir: Path):
    """Returns (train, test, scene-or-None); writes both splits under data/."""
    sc = cfg.scene
    scene = None
    bg = tuple(cfg.render.background)
    if sc.source == "analytic":
        scene = builtin_scene(sc.name)
        common = dict(
            resolution=sc.resolution,
            radius=sc.radius,
            elevation_range=sc.elevation_range,
            n_quadrature=sc.n_quadrature,
            near=cfg.render.near,
            far=cfg.render.far,
            background=bg,
        )
        train = synth_dataset(scene, sc.n_train, seed=cfg.seed, **common)
        if sc.n_test:
            test = synth_dataset(scene, sc.n_test, seed=cfg.seed + 1, **common)
        else:
            test = train.subset([])
    else:
        full = load_manifest(sc.manifest, background=bg)
        if sc.test_manifest:
            train, _ = make_sparse_split(full, sc.n_train, sc.split_rule)
            test = load_manifest(sc.test_manifest, background=bg)
        else:
            train, test = make_sparse_split(full, sc.n_train, sc.split_rule)
    write_manifest(train, out_dir / "data" / "train")
    if len(test):
        write_manifest(test, out_dir / "data" / "test")
    return train, test, scene


def _save_renders(images, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        Image.fromarray(quantize(img), mode="RGB").save(directory / f"test_{i:03d}.png")


def _evaluate(fld, dataset, rcfg, threads, digest):
    if not len(dataset):
        return None, []
    preds = render_dataset(fld, dataset.cameras, rcfg, threads)
    return evaluate_images(preds, list(dataset.images), digest), preds


def _finish_stage(name, result, fld_kind, out_dir, train, test, rcfg, cfg, t0, stage_no=None):
    ckpt = save_checkpoint(result.field, out_dir / name / "checkpoint", {"step": len(result.losses), "stage": name})
    metrics, preds = _evaluate(result.field, test, rcfg, cfg.threads, cfg.digest())
    if preds:
        _save_renders(preds, out_dir / "renders" / name)
    train_preds = render_dataset(result.field, train.cameras, rcfg, cfg.threads)
    entry = {
        "name": name,
        "field_kind": fld_kind,
        "iterations": len(result.losses),
        "initial_loss": result.losses[0] if result.losses else None,
        "final_loss": result.losses[-1] if result.losses else None,
        "loss": result.losses,
        "train_psnr": float(np.mean([psnr(p, g) for p, g in zip(train_preds, train.images)])),
        "metrics": metrics.to_dict() if metrics else None,
        "checkpoint": str(ckpt.relative_to(out_dir)),
        "loss_csv": f"{name}/loss.csv",
        "wall_seconds": time.perf_counter() - t0,
    }
    if stage_no is not None:
        entry["stage"] = stage_no
    if metrics:
        log.info("%s: test PSNR %.3f dB, SSIM %.4f", name, metrics.mean_psnr, metrics.mean_ssim)
    return entry


def run_pipeline(cfg: RunConfig, out_dir) -> dict:
    """Run the configured stages (and optional baseline) and write the report.

    A failing stage stops the run; the report written so far is kept with
    ``complete = False`` and the error message.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    report = {
        "config": cfg.snapshot(),
        "config_hash": cfg.digest(),
        "stages": [],
        "baseline": None,
        "pseudo": None,
        "reference_trend": REFERENCE_TREND,
        "complete": False,
        "error": None,
    }
    train_rcfg = render_config(cfg)
    eval_rcfg = render_config(cfg, eval_mode=True)
    stage = "data"
    try:
        train, test, scene = prepare_datasets(cfg, out_dir)
        report["data"] = {"n_train": len(train), "n_test": len(test), "resolution": list(train.images.shape[1:3])}

        stage = "stage1"
        t0 = time.perf_counter()
        reg = build_field(cfg.reg_field, cfg.seed)
        res1 = train_stage1(train, reg, stage_config(cfg, 1), train_rcfg)
        report["stages"].append(_finish_stage("stage1", res1, reg.kind, out_dir, train, test, eval_rcfg, cfg, t0, 1))

        if 2 in cfg.stages:
            stage = "pseudo"
            t0 = time.perf_counter()
            ps = cfg.pseudo
            poses = sample_poses_sphere_cap(
                ps.n_views,
                ps.radius or cfg.scene.radius,
                ps.elevation_range or cfg.scene.elevation_range,
                seed=cfg.seed + 2,
            )
            cams = cameras_from_poses(poses, train.cameras[0])
            pseudo = generate_pseudo_views(
                res1.field, cams, eval_rcfg, out_dir / "pseudo",
                extra_frames=train.frames if ps.include_sparse else None, threads=cfg.threads,
            )
            info = {"n_rendered": len(cams), "n_real": len(pseudo) - len(cams), "dir": "pseudo"}
            if scene is not None and ps.score_against_oracle:
                gts = [
                    oracle_render(scene, c, cfg.scene.n_quadrature, cfg.render.near, cfg.render.far, cfg.render.background)
                    for c in cams
                ]
                info["psnr_vs_oracle"] = float(np.mean([psnr(f.image, g) for f, g in zip(pseudo.frames, gts)]))
            info["wall_seconds"] = time.perf_counter() - t0
            report["pseudo"] = info

            stage = "stage2"
            t0 = time.perf_counter()
            fast = build_field(cfg.fast_field, cfg.seed)
            res2 = train_stage2(pseudo, fast, stage_config(cfg, 2), train_rcfg)
            report["stages"].append(_finish_stage("stage2", res2, fast.kind, out_dir, train, test, eval_rcfg, cfg, t0, 2))

        if 3 in cfg.stages:
            stage = "stage3"
            t0 = time.perf_counter()
            res3 = train_stage3(train, res2.field, stage_config(cfg, 3), train_rcfg, optimizer=res2.optimizer)
            report["stages"].append(_finish_stage("stage3", res3, res3.field.kind, out_dir, train, test, eval_rcfg, cfg, t0, 3))

        if cfg.baseline == "fast-sparse":
            stage = "baseline"
            t0 = time.perf_counter()
            total = cfg.stage2.iterations + (cfg.stage3.iterations if 3 in cfg.stages else 0)
            fast0 = build_field(cfg.fast_field, cfg.seed)
            bcfg = replace(stage_config(cfg, 2, iterations=total), seed=cfg.seed * 1000 + 9)
            resb = train_stage(train, fast0, bcfg, train_rcfg, label="baseline")
            entry = _finish_stage("baseline", resb, fast0.kind, out_dir, train, test, eval_rcfg, cfg, t0)
            entry["kind"] = "fast-sparse"
            report["baseline"] = entry
            last = report["stages"][-1]
            if entry["metrics"] and last["metrics"]:
                report["baseline_margin_db"] = last["metrics"]["mean_psnr"] - entry["metrics"]["mean_psnr"]
        report["complete"] = True
    except Exception as exc:  # noqa: BLE001 - any stage failure yields a partial report
        report["error"] = f"{stage}: {type(exc).__name__}: {exc}"
        log.error("run failed in %s\n%s", stage, traceback.format_exc())
    report["total_seconds"] = time.perf_counter() - t_start
    emit_report(report, out_dir)
    return report


def strip_timing(report):
    """Copy of a report with timing fields removed (for determinism checks)."""
    if isinstance(report, dict):
        return {k: strip_timing(v) for k, v in report.items() if k not in TIMING_KEYS}
    if isinstance(report, list):
        return [strip_timing(v) for v in report]
    return report
