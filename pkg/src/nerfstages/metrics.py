"""PSNR / SSIM and report files.

Conventions: images are linear RGB floats in [0, 1] (MAX = 1). SSIM uses an
11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, is evaluated at
valid window positions only, per RGB channel, then averaged over channels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ImageTooSmall, ShapeMismatch

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, valid region only; img is (H, W, C)
    k = len(g)
    H, W = img.shape[:2]
    rows = sum(g[i] * img[i : H - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j : W - k + 1 + j] for j in range(k))


def ssim_map(a, b):
    """Luminance and contrast-structure maps over valid windows, each (H-10, W-10, C).

    SSIM is their elementwise product.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + C1) / (mu_a**2 + mu_b**2 + C1)
    cs = (2 * cov + C2) / (var_a + var_b + C2)
    return lum, cs


def ssim(a, b) -> float:
    lum, cs = ssim_map(a, b)
    return float(np.mean(lum * cs))


def ssim_contrast_structure(a, b) -> float:
    """Mean of the contrast-structure factor alone (shift-invariant part of SSIM)."""
    _, cs = ssim_map(a, b)
    return float(np.mean(cs))


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    views: list = field(default_factory=list)
    config_hash: str = ""

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["psnr"]), list(d["ssim"]), list(d.get("views", [])), d.get("config_hash", ""))


def evaluate_images(preds, gts, config_hash: str = "", views=None) -> MetricReport:
    rep = MetricReport(config_hash=config_hash)
    for i, (p, g) in enumerate(zip(preds, gts)):
        rep.psnr.append(psnr(p, g))
        rep.ssim.append(ssim(p, g))
        rep.views.append(views[i] if views is not None else i)
    return rep


def write_loss_csv(losses, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def read_loss_csv(path) -> list:
    with Path(path).open() as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def write_metrics_csv(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for v, p, s in zip(report.views, report.psnr, report.ssim):
            w.writerow([v, repr(p), repr(s)])
    return path


def stage_table(entries) -> str:
    """Plain-text comparison table; ``entries`` are (label, MetricReport) pairs."""
    lines = [f"{'stage':<16}{'PSNR (dB)':>12}{'SSIM':>10}", "-" * 38]
    for label, rep in entries:
        lines.append(f"{label:<16}{rep.mean_psnr:>12.3f}{rep.mean_ssim:>10.4f}")
    return "\n".join(lines) + "\n"


def emit_report(report: dict, out_dir) -> list:
    """Write ``report.json``, per-stage CSVs and ``table.txt`` under ``out_dir``.

    ``report`` follows the pipeline report schema: a ``stages`` list whose
    entries carry ``name``, ``metrics`` (a MetricReport dict) and optionally
    ``loss``; plus an optional ``baseline`` entry of the same shape.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for st in list(report.get("stages", [])) + ([report["baseline"]] if report.get("baseline") else []):
        name = st["name"]
        if st.get("loss") is not None:
            written.append(write_loss_csv(st["loss"], out_dir / name / "loss.csv"))
        if st.get("metrics"):
            rep = MetricReport.from_dict(st["metrics"])
            written.append(write_metrics_csv(rep, out_dir / name / "metrics.csv"))
            entries.append((name, rep))
    table = out_dir / "table.txt"
    table.write_text(stage_table(entries))
    written.append(table)
    slim = json.loads(json.dumps(report))
    for st in slim.get("stages", []) + ([slim["baseline"]] if slim.get("baseline") else []):
        st.pop("loss", None)
    rpath = out_dir / "report.json"
    rpath.write_text(json.dumps(slim, indent=2, sort_keys=True))
    written.insert(0, rpath)
    return written
