"""Scene datasets: Blender-style manifests, sparse splits and analytic scenes.

Images are linear RGB in [0, 1] held as float32 and stored on disk as 8-bit
PNG. In-memory images produced here are always already quantised to the
8-bit grid so that writing and re-loading is bit-exact.

``oracle_render`` integrates the emission-absorption integral of an
:class:`AnalyticScene` with a midpoint Riemann sum of
``sigma(t) c(t) exp(-tau(t))``. It deliberately does not use the alpha
compositing code in :mod:`nerfstages.renderer`, so agreement between the two
is a real check.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, MissingFile, NotEnoughFrames, SchemaError
from .field import RadianceField, register
from .geometry import ORTHO_TOL, Camera, camera_rays, focal_from_fov, sample_poses_sphere_cap

MANIFEST_NAME = "transforms.json"
BLENDER_CAMERA_ANGLE_X = 0.6911112


def quantize(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(img8) -> np.ndarray:
    return (np.asarray(img8, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray  # (H, W, 3) float32
    file_path: Optional[str] = None


@dataclass
class SceneDataset:
    frames: list
    background: tuple = (1.0, 1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {f.image.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames have differing image shapes: {sorted(shapes)}")
        for f in self.frames:
            if f.image.shape != (f.camera.height, f.camera.width, 3):
                raise ValueError("image shape does not match camera resolution")

    def __len__(self):
        return len(self.frames)

    @property
    def cameras(self) -> list:
        return [f.camera for f in self.frames]

    @property
    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    @property
    def pseudo(self) -> bool:
        return bool(self.metadata.get("pseudo", False))

    def subset(self, indices) -> SceneDataset:
        return SceneDataset([self.frames[i] for i in indices], self.background, dict(self.metadata))


def make_sparse_split(dataset: SceneDataset, n_train: int, rule: str = "first-n"):
    """Split into (train, test); ``rule`` is ``"first-n"`` or ``"uniform"``."""
    n = len(dataset)
    if n_train < 1 or n_train > n:
        raise NotEnoughFrames(f"cannot take {n_train} training views from {n} frames")
    if rule == "first-n":
        train_idx = list(range(n_train))
    elif rule == "uniform":
        train_idx = [int(i) for i in np.round(np.linspace(0, n - 1, n_train))]
    else:
        raise ValueError(f"unknown split rule {rule!r}")
    test_idx = [i for i in range(n) if i not in set(train_idx)]
    if not test_idx:
        warnings.warn("all frames used for training; test split is empty", stacklevel=2)
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)
    train.metadata["split"] = {"rule": rule, "indices": train_idx}
    test.metadata["split"] = {"rule": rule, "indices": test_idx}
    return train, test


# ---------------------------------------------------------------------------
# manifest I/O


def write_manifest(dataset: SceneDataset, out_dir, name: str = MANIFEST_NAME) -> list:
    """Write ``name`` plus one PNG per frame under ``out_dir/images``.

    Returns the list of written paths, manifest first.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if not dataset.frames:
        raise ValueError("cannot write an empty dataset")
    cam0 = dataset.frames[0].camera
    if any(f.camera.focal != cam0.focal or f.camera.width != cam0.width for f in dataset.frames):
        raise ValueError("all frames must share intrinsics")
    paths = []
    frames = []
    for i, f in enumerate(dataset.frames):
        rel = f"./images/r_{i:03d}"
        img_path = out_dir / "images" / f"r_{i:03d}.png"
        Image.fromarray(quantize(f.image), mode="RGB").save(img_path, optimize=False)
        paths.append(img_path)
        frames.append({"file_path": rel, "transform_matrix": f.camera.matrix4().tolist()})
    manifest = {
        "camera_angle_x": cam0.camera_angle_x,
        "frames": frames,
        "background": list(dataset.background),
        "metadata": dataset.metadata,
    }
    mpath = out_dir / name
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return [mpath] + paths


def _require(cond, msg, key):
    if not cond:
        raise SchemaError(msg, key)


def _decode_image(path: Path, background) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
                rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
                bg = np.asarray(background, dtype=np.float64)
                rgb = rgba[..., :3] * rgba[..., 3:] + bg * (1.0 - rgba[..., 3:])
                return dequantize(quantize(rgb))
            return dequantize(np.asarray(im.convert("RGB")))
    except FileNotFoundError as exc:
        raise MissingFile(str(path)) from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc


def load_manifest(path, background=None) -> SceneDataset:
    """Load a Blender-style ``transforms`` manifest (file or directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "manifest must be an object", "")
    angle = doc.get("camera_angle_x")
    _require(isinstance(angle, (int, float)) and 0 < angle < np.pi, "must be a number in (0, pi)", "camera_angle_x")
    frames = doc.get("frames")
    _require(isinstance(frames, list), "missing or not a list", "frames")
    _require(len(frames) > 0, "manifest has no frames", "frames")
    if background is None:
        background = tuple(doc.get("background", (1.0, 1.0, 1.0)))
    out = []
    for i, fr in enumerate(frames):
        key = f"frames[{i}]"
        _require(isinstance(fr, dict), "frame must be an object", key)
        fp = fr.get("file_path")
        _require(isinstance(fp, str) and fp, "missing file_path", f"{key}.file_path")
        try:
            mat = np.asarray(fr.get("transform_matrix"), dtype=np.float64)
        except (TypeError, ValueError):
            mat = None
        _require(mat is not None and mat.shape == (4, 4), "must be a 4x4 matrix", f"{key}.transform_matrix")
        rot = mat[:3, :3]
        _require(
            np.abs(rot.T @ rot - np.eye(3)).max() < ORTHO_TOL and np.all(np.isfinite(mat)),
            "rotation block is not orthonormal",
            f"{key}.transform_matrix",
        )
        img_path = (path.parent / fp).resolve()
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        img = _decode_image(img_path, background)
        h, w = img.shape[:2]
        cam = Camera(w, h, focal_from_fov(w, angle), mat)
        out.append(Frame(cam, img, fp))
    return SceneDataset(out, tuple(float(b) for b in background), dict(doc.get("metadata", {})))


# ---------------------------------------------------------------------------
# analytic scenes


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass(frozen=True)
class Primitive:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = half extents).

    Density is ``density`` inside, ramping smoothly to zero across a shell of
    width ``falloff`` centred on the surface; ``falloff = 0`` gives a hard edge.
    """

    shape: str
    center: tuple
    size: object
    density: float
    albedo: tuple
    falloff: float = 0.0

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.density < 0:
            raise ValueError("primitive density must be >= 0")

    def signed_distance(self, x):
        c = np.asarray(self.center, dtype=x.dtype)
        if self.shape == "sphere":
            return np.linalg.norm(x - c, axis=-1) - self.size
        half = np.asarray(self.size, dtype=x.dtype)
        return np.max(np.abs(x - c) - half, axis=-1)

    def sigma(self, x):
        sd = self.signed_distance(x)
        if self.falloff > 0:
            return self.density * _smoothstep(0.5 - sd / self.falloff)
        return np.where(sd <= 0.0, self.density, 0.0)

    def to_dict(self) -> dict:
        size = self.size if np.isscalar(self.size) else list(self.size)
        return {
            "shape": self.shape,
            "center": list(self.center),
            "size": size,
            "density": self.density,
            "albedo": list(self.albedo),
            "falloff": self.falloff,
        }

    @classmethod
    def from_dict(cls, d):
        size = d["size"] if np.isscalar(d["size"]) else tuple(d["size"])
        return cls(d["shape"], tuple(d["center"]), size, float(d["density"]), tuple(d["albedo"]), float(d.get("falloff", 0.0)))


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    name: str = "custom"

    def sigma_and_color(self, x):
        x = np.asarray(x)
        total = np.zeros(x.shape[:-1], dtype=x.dtype)
        col = np.zeros(x.shape[:-1] + (3,), dtype=x.dtype)
        for p in self.primitives:
            s = p.sigma(x)
            total += s
            col += s[..., None] * np.asarray(p.albedo, dtype=x.dtype)
        safe = np.where(total > 0, total, 1.0)
        col = np.where(total[..., None] > 0, col / safe[..., None], 0.0)
        return total, col

    def to_dict(self) -> dict:
        return {"name": self.name, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Primitive.from_dict(p) for p in d.get("primitives", [])), d.get("name", "custom"))


def tri_sphere(falloff: float = 0.1) -> AnalyticScene:
    """Standard desk scene: three soft colored spheres of distinct radii."""
    return AnalyticScene(
        (
            Primitive("sphere", (0.35, -0.25, 0.1), 0.55, 25.0, (0.9, 0.2, 0.15), falloff),
            Primitive("sphere", (-0.45, 0.35, 0.25), 0.4, 25.0, (0.2, 0.8, 0.3), falloff),
            Primitive("sphere", (0.05, 0.5, -0.45), 0.3, 25.0, (0.2, 0.35, 0.9), falloff),
        ),
        "tri-sphere",
    )


SCENES = {"tri-sphere": tri_sphere, "empty": lambda: AnalyticScene((), "empty")}


def builtin_scene(name: str) -> AnalyticScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; built-in scenes: {sorted(SCENES)}") from None


@register
class AnalyticField(RadianceField):
    """Exact density/color of an analytic scene behind the field interface."""

    kind = "analytic"

    def __init__(self, scene=None):
        super().__init__()
        if isinstance(scene, dict):
            scene = AnalyticScene.from_dict(scene)
        self.scene = scene if scene is not None else AnalyticScene()

    def config(self) -> dict:
        return {"scene": self.scene.to_dict()}

    def query(self, positions, directions):
        s, c = self.scene.sigma_and_color(np.asarray(positions))
        return s, c, None

    def backward(self, cache, d_sigma, d_rgb) -> dict:
        return {}


def oracle_render(
    scene: AnalyticScene,
    camera: Camera,
    n_quadrature: int = 4096,
    near: float = 2.0,
    far: float = 6.0,
    background=(1.0, 1.0, 1.0),
    chunk: int = 256,
) -> np.ndarray:
    """Ground-truth image by midpoint quadrature of the rendering integral."""
    if n_quadrature < 64:
        raise ValueError("n_quadrature must be >= 64")
    origins, dirs = camera_rays(camera)
    bg = np.asarray(background, dtype=np.float64)
    step = (far - near) / n_quadrature
    t = near + (np.arange(n_quadrature) + 0.5) * step
    out = np.empty((len(dirs), 3))
    for s in range(0, len(dirs), chunk):
        o, d = origins[s : s + chunk], dirs[s : s + chunk]
        x = o[:, None, :] + t[None, :, None] * d[:, None, :]
        sig, col = scene.sigma_and_color(x)
        optical = sig * step
        before = np.cumsum(optical, axis=1) - optical
        trans_mid = np.exp(-(before + 0.5 * optical))
        emitted = np.sum((optical * trans_mid)[..., None] * col, axis=1)
        out[s : s + chunk] = emitted + np.exp(-optical.sum(axis=1))[:, None] * bg
    return np.clip(out, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def synth_dataset(
    scene: AnalyticScene,
    n_views: int,
    resolution: int = 64,
    seed: int = 0,
    radius: float = 4.0,
    elevation_range=(15.0, 60.0),
    camera_angle_x: float = BLENDER_CAMERA_ANGLE_X,
    n_quadrature: int = 512,
    near: float = 2.0,
    far: float = 6.0,
    background=(1.0, 1.0, 1.0),
) -> SceneDataset:
    """Oracle-rendered views from sphere-cap cameras; images are 8-bit quantised."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    focal = focal_from_fov(resolution, camera_angle_x)
    frames = []
    for pose in sample_poses_sphere_cap(n_views, radius, elevation_range, seed):
        cam = Camera(resolution, resolution, focal, pose)
        img = oracle_render(scene, cam, n_quadrature, near, far, background)
        frames.append(Frame(cam, dequantize(quantize(img))))
    meta = {
        "pseudo": False,
        "generator": scene.to_dict(),
        "seed": seed,
        "radius": radius,
        "elevation_range": list(elevation_range),
        "n_quadrature": n_quadrature,
    }
    return SceneDataset(frames, tuple(background), meta)
