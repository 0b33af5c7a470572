"""Command-line entry point: ``nerfstages synth | run | eval | render``.

Progress goes to standard error; output paths and tables to standard output.
Exit codes: 0 ok, 1 runtime/IO failure, 2 usage error.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import load_config
from .dataset import SCENES, builtin_scene, load_manifest, quantize, synth_dataset, write_manifest
from .errors import NerfStagesError
from .field import load_checkpoint
from .geometry import Camera, focal_from_fov
from .metrics import evaluate_images, stage_table, write_metrics_csv
from .pipeline import run_pipeline
from .renderer import RenderConfig
from .trainer import render_dataset


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s",
        force=True,
    )


def _render_cfg(near, far, samples, background) -> RenderConfig:
    return RenderConfig(near=near, far=far, n_samples=samples, background=tuple(background), jitter_mode="midpoint")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging on stderr.")
def main(verbose):
    """Three-stage few-shot radiance field pipeline on analytic or manifest scenes."""
    _setup_logging(verbose)


@main.command()
@click.option("--scene", type=click.Choice(sorted(SCENES)), default="tri-sphere", show_default=True,
              help="Built-in analytic scene.")
@click.option("--views", type=click.IntRange(min=1), default=40, show_default=True, help="Number of views.")
@click.option("--res", type=click.IntRange(min=1), default=64, show_default=True, help="Image width and height.")
@click.option("--seed", type=int, default=0, show_default=True, help="Pose sampling seed.")
@click.option("--quadrature", type=click.IntRange(min=16), default=512, show_default=True,
              help="Oracle quadrature steps per ray.")
@click.option("--radius", type=click.FloatRange(min=0, min_open=True), default=4.0, show_default=True,
              help="Camera distance from the origin.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output dataset directory.")
def synth(scene, views, res, seed, quadrature, radius, out):
    """Render an analytic scene with the oracle and write a manifest dataset."""
    try:
        ds = synth_dataset(builtin_scene(scene), views, resolution=res, seed=seed, radius=radius,
                           n_quadrature=quadrature)
        write_manifest(ds, out)
    except OSError as exc:
        _fail(str(exc))
    click.echo(str(Path(out) / "transforms.json"))


def _parse_override(ctx, param, values):
    out = {}
    for item in values:
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON or YAML run config; flags override it.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run output directory.")
@click.option("--stages", type=click.IntRange(1, 3), default=None,
              help="Run stages 1..N only (default: all three).")
@click.option("--baseline", type=click.Choice(["fast-sparse", "none"]), default=None,
              help="Also train the fast field directly on the sparse views.")
@click.option("--seed", type=int, default=None, help="Run seed.")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Render worker threads (default: CPU count).")
@click.option("--set", "overrides", multiple=True, callback=_parse_override, metavar="KEY=VALUE",
              help="Dotted config override, e.g. stage1.iterations=500 (repeatable).")
def run(config_path, out, stages, baseline, seed, threads, overrides):
    """Execute the pipeline and print the stage PSNR table."""
    flags = dict(overrides)
    if stages is not None:
        flags["stages"] = list(range(1, stages + 1))
    if baseline is not None:
        flags["baseline"] = None if baseline == "none" else baseline
    if seed is not None:
        flags["seed"] = seed
    flags["threads"] = threads if threads is not None else (os.cpu_count() or 1)
    if config_path and not Path(config_path).is_file():
        _fail(f"config file not found: {config_path}")
    try:
        cfg = load_config(config_path, flags)
    except NerfStagesError as exc:
        raise click.UsageError(str(exc))
    except (ValueError, OSError) as exc:
        _fail(f"cannot read config: {exc}")
    report = run_pipeline(cfg, out)
    click.echo((Path(out) / "table.txt").read_text(), nl=False)
    click.echo(str(Path(out) / "report.json"))
    if not report["complete"]:
        _fail(report["error"])


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True, help="Field checkpoint to evaluate.")
@click.option("--data", type=click.Path(), required=True, help="Manifest (or its directory) with test views.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Directory for metrics output.")
@click.option("--against-checkpoint", type=click.Path(), default=None,
              help="Score against renders of this checkpoint instead of the dataset images.")
@click.option("--near", type=float, default=2.0, show_default=True)
@click.option("--far", type=float, default=6.0, show_default=True)
@click.option("--samples", type=click.IntRange(min=2), default=64, show_default=True, help="Samples per ray.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Render worker threads.")
def eval_cmd(checkpoint, data, out, against_checkpoint, near, far, samples, threads):
    """Render the dataset's views from a checkpoint and write PSNR/SSIM."""
    threads = threads or os.cpu_count() or 1
    try:
        fld, _ = load_checkpoint(checkpoint)
        ds = load_manifest(data)
        rcfg = _render_cfg(near, far, samples, ds.background)
        preds = render_dataset(fld, ds.cameras, rcfg, threads)
        if against_checkpoint:
            ref, _ = load_checkpoint(against_checkpoint)
            gts = render_dataset(ref, ds.cameras, rcfg, threads)
        else:
            gts = list(ds.images)
    except (OSError, NerfStagesError) as exc:
        _fail(str(exc))
    rep = evaluate_images(preds, gts)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    write_metrics_csv(rep, out / "metrics.csv")
    click.echo(stage_table([("eval", rep)]), nl=False)
    click.echo(str(out / "metrics.json"))


def _poses_from_file(path):
    """JSON with ``poses`` (list of 3x4/4x4) plus ``width``, ``height`` and ``focal`` or ``camera_angle_x``."""
    spec = json.loads(Path(path).read_text())
    w, h = int(spec["width"]), int(spec.get("height", spec["width"]))
    focal = float(spec["focal"]) if "focal" in spec else focal_from_fov(w, float(spec["camera_angle_x"]))
    return [Camera(w, h, focal, np.asarray(p, dtype=np.float64)) for p in spec["poses"]]


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True, help="Field checkpoint to render.")
@click.option("--poses", type=click.Path(dir_okay=False), default=None,
              help="JSON file: poses, width, height, focal or camera_angle_x.")
@click.option("--manifest", type=click.Path(), default=None, help="Render the cameras of this manifest.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output image directory.")
@click.option("--near", type=float, default=2.0, show_default=True)
@click.option("--far", type=float, default=6.0, show_default=True)
@click.option("--samples", type=click.IntRange(min=2), default=64, show_default=True, help="Samples per ray.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Render worker threads.")
def render(checkpoint, poses, manifest, out, near, far, samples, threads):
    """Render arbitrary poses from a checkpoint to PNG files."""
    if (poses is None) == (manifest is None):
        raise click.UsageError("give exactly one of --poses or --manifest")
    threads = threads or os.cpu_count() or 1
    try:
        fld, _ = load_checkpoint(checkpoint)
        if manifest:
            ds = load_manifest(manifest)
            cams, bg = ds.cameras, ds.background
        else:
            cams, bg = _poses_from_file(poses), (1.0, 1.0, 1.0)
        imgs = render_dataset(fld, cams, _render_cfg(near, far, samples, bg), threads)
    except (OSError, KeyError, ValueError, NerfStagesError) as exc:
        _fail(str(exc))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(imgs):
        path = out / f"view_{i:03d}.png"
        Image.fromarray(quantize(img), mode="RGB").save(path)
        click.echo(str(path))


if __name__ == "__main__":
    main()
