"""Cameras, rigid poses and pixel-to-ray generation.

Conventions follow the Blender-synthetic layout: a camera looks along its
own -z axis, image rows grow downward while camera +y points up, and the
world up vector is +z. A pose is a 3x4 camera-to-world matrix ``[R | t]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrame, OutOfBounds

ORTHO_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with principal point at the image center."""

    width: int
    height: int
    focal: float
    pose: np.ndarray

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape == (4, 4):
            pose = pose[:3]
        if pose.shape != (3, 4):
            raise ValueError(f"pose must be 3x4 or 4x4, got {pose.shape}")
        if self.width <= 0 or self.height <= 0 or not self.focal > 0:
            raise ValueError("width, height and focal must be positive")
        rot = pose[:, :3]
        resid = np.abs(rot.T @ rot - np.eye(3)).max()
        if not resid < ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (residual {resid:.3g})")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation must be right-handed")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "pose", _frozen(pose))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3]

    @property
    def camera_angle_x(self) -> float:
        return 2.0 * float(np.arctan(0.5 * self.width / self.focal))

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3] = self.pose
        return m

    def with_resolution(self, width: int, height: int) -> Camera:
        """Same pose and field of view at a different image size."""
        return Camera(width, height, self.focal * width / self.width, self.pose)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.focal == other.focal
            and np.array_equal(self.pose, other.pose)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, got norm {n}")
        object.__setattr__(self, "origin", _frozen(self.origin))
        object.__setattr__(self, "direction", _frozen(d))


def focal_from_fov(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / np.tan(0.5 * camera_angle_x)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` whose -z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    view = target - eye
    dist = np.linalg.norm(view)
    if dist < 1e-12:
        raise DegenerateFrame("eye and target coincide")
    view = view / dist
    right = np.cross(view, up)
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise DegenerateFrame("up vector is parallel to the viewing direction")
    right /= n
    z_axis = -view
    y_axis = np.cross(z_axis, right)
    pose = np.empty((3, 4))
    pose[:, 0] = right
    pose[:, 1] = y_axis
    pose[:, 2] = z_axis
    pose[:, 3] = eye
    return pose


def pixel_ray(camera: Camera, px: int, py: int, jitter=(0.5, 0.5)) -> Ray:
    """Ray through pixel (px, py); jitter (0.5, 0.5) hits the pixel center."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise OutOfBounds(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    jx, jy = jitter
    d_cam = np.array(
        [
            (px + jx - 0.5 * camera.width) / camera.focal,
            -(py + jy - 0.5 * camera.height) / camera.focal,
            -1.0,
        ]
    )
    d = camera.rotation @ d_cam
    return Ray(camera.center, d / np.linalg.norm(d))


def camera_rays(camera: Camera, jitter=(0.5, 0.5), dtype=np.float64):
    """All rays of a camera in row-major pixel order.

    Returns:
        origins, directions: arrays of shape (H*W, 3).
    """
    jx, jy = jitter
    xs = (np.arange(camera.width) + jx - 0.5 * camera.width) / camera.focal
    ys = -(np.arange(camera.height) + jy - 0.5 * camera.height) / camera.focal
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape)
    return np.ascontiguousarray(o, dtype=dtype), np.ascontiguousarray(d, dtype=dtype)


def sample_poses_sphere_cap(
    n: int,
    radius: float,
    elevation_range=(15.0, 60.0),
    seed: int = 0,
) -> list[np.ndarray]:
    """Poses on a sphere cap, all looking at the origin.

    Azimuths are stratified over [0, 360) with one random draw per stratum;
    elevations are uniform in ``elevation_range`` (degrees).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    az = (np.arange(n) + rng.random(n)) / n * 2.0 * np.pi
    lo, hi = np.deg2rad(elevation_range[0]), np.deg2rad(elevation_range[1])
    el = lo + (hi - lo) * rng.random(n)
    poses = []
    for a, e in zip(az, el):
        eye = radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        poses.append(look_at(eye, np.zeros(3), (0.0, 0.0, 1.0)))
    return poses
