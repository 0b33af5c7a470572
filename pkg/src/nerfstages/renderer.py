"""Stratified ray sampling and differentiable volume compositing.

Both radiance fields share this code. ``composite`` is the discrete
emission-absorption sum

    C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_{N+1} * background,
    T_i = exp(-sum_{j<i} sigma_j delta_j),

and ``composite_backward`` is its hand-derived adjoint.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidBounds, NonFiniteInput, ShapeMismatch
from .geometry import Camera, Ray, camera_rays


@dataclass(frozen=True)
class RenderConfig:
    near: float = 2.0
    far: float = 6.0
    n_samples: int = 64
    background: tuple = (1.0, 1.0, 1.0)
    jitter_mode: str = "midpoint"  # or "stratified"
    # Samples outside this box are treated as empty and never sent to the field.
    bbox: Optional[tuple] = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    chunk: int = 4096

    def __post_init__(self):
        if not 0 <= self.near < self.far:
            raise InvalidBounds(f"need 0 <= near < far, got {self.near}, {self.far}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.jitter_mode not in ("midpoint", "stratified"):
            raise ValueError(f"unknown jitter_mode {self.jitter_mode!r}")


@dataclass
class SampleBatch:
    t_values: np.ndarray  # (..., S)
    deltas: np.ndarray  # (..., S)
    positions: np.ndarray  # (..., S, 3)
    directions: np.ndarray  # (..., S, 3)


@dataclass
class CompositeOutput:
    pixel_color: np.ndarray  # (..., 3)
    weights: np.ndarray  # (..., S)
    residual_transmittance: np.ndarray  # (...)
    expected_depth: Optional[np.ndarray] = None
    transmittance: Optional[np.ndarray] = None  # (..., S + 1), T_1 .. T_{N+1}


def stratified_depths(near, far, n, rng_draw):
    """Depths with one draw per equal-width stratum; ``rng_draw`` is (..., n) in [0, 1)."""
    if not 0 <= near < far:
        raise InvalidBounds(f"need 0 <= near < far, got {near}, {far}")
    if n < 2:
        raise ValueError("need at least 2 samples")
    u = np.asarray(rng_draw)
    if u.shape[-1] != n:
        raise ShapeMismatch(f"rng_draw has {u.shape[-1]} entries, expected {n}")
    width = (far - near) / n
    t = near + (np.arange(n, dtype=u.dtype) + u) * width
    deltas = np.empty_like(t)
    deltas[..., :-1] = t[..., 1:] - t[..., :-1]
    deltas[..., -1] = width
    return t, deltas


def stratified_samples(ray: Ray, near: float, far: float, n: int, rng_draw) -> SampleBatch:
    t, deltas = stratified_depths(near, far, n, np.asarray(rng_draw, dtype=np.float64))
    pos = ray.origin + t[:, None] * ray.direction
    dirs = np.broadcast_to(ray.direction, pos.shape)
    return SampleBatch(t, deltas, pos, dirs)


def _check_composite_inputs(sigmas, colors, deltas):
    sigmas = np.asarray(sigmas)
    colors = np.asarray(colors)
    deltas = np.asarray(deltas)
    if sigmas.shape != deltas.shape or colors.shape != sigmas.shape + (3,):
        raise ShapeMismatch(
            f"sigmas {sigmas.shape}, deltas {deltas.shape}, colors {colors.shape} do not agree"
        )
    if not np.all(np.isfinite(sigmas)) or not np.all(np.isfinite(colors)):
        raise NonFiniteInput("non-finite density or color")
    if np.any(sigmas < 0):
        raise NonFiniteInput("negative density")
    return sigmas, colors, deltas


def composite(sigmas, colors, deltas, background=(1.0, 1.0, 1.0), t_values=None) -> CompositeOutput:
    """Alpha-composite samples along the last axis (batched over leading axes)."""
    sigmas, colors, deltas = _check_composite_inputs(sigmas, colors, deltas)
    bg = np.asarray(background, dtype=colors.dtype)
    tau = sigmas * deltas
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(acc[..., :1]), acc], axis=-1))
    alpha = -np.expm1(-tau)
    weights = trans[..., :-1] * alpha
    resid = trans[..., -1]
    pixel = np.einsum("...s,...sc->...c", weights, colors) + resid[..., None] * bg
    depth = None
    if t_values is not None:
        depth = np.sum(weights * t_values, axis=-1)
    return CompositeOutput(pixel, weights, resid, depth, trans)


def composite_backward(sigmas, colors, deltas, background, d_pixel, out: CompositeOutput = None):
    """Gradients of a loss w.r.t. densities and colors given dL/d(pixel color).

    dC/dc_i = w_i and, writing S_k for everything composited behind sample k
    (later samples plus the background term),

        dC/dsigma_k = delta_k * (T_{k+1} c_k - S_k).
    """
    sigmas, colors, deltas = _check_composite_inputs(sigmas, colors, deltas)
    d_pixel = np.asarray(d_pixel)
    if d_pixel.shape != colors.shape[:-2] + (3,):
        raise ShapeMismatch(f"upstream gradient shape {d_pixel.shape} does not match")
    if out is None:
        out = composite(sigmas, colors, deltas, background)
    bg = np.asarray(background, dtype=colors.dtype)
    trans = out.transmittance
    wc = out.weights[..., None] * colors
    # behind[k] = sum_{i>k} w_i c_i + T_{N+1} bg
    rev = np.cumsum(wc[..., ::-1, :], axis=-2)[..., ::-1, :]
    behind = np.empty_like(wc)
    behind[..., :-1, :] = rev[..., 1:, :]
    behind[..., -1, :] = 0.0
    behind += out.residual_transmittance[..., None, None] * bg
    dc_dsigma = deltas[..., None] * (trans[..., 1:, None] * colors - behind)
    d_sigma = np.einsum("...sc,...c->...s", dc_dsigma, d_pixel)
    d_colors = out.weights[..., None] * d_pixel[..., None, :]
    return d_sigma, d_colors


@dataclass
class RenderResult:
    rgb: np.ndarray  # (R, 3)
    sigmas: np.ndarray  # (R, S)
    colors: np.ndarray  # (R, S, 3)
    deltas: np.ndarray
    t_values: np.ndarray
    composite: CompositeOutput
    inside: Optional[np.ndarray] = None  # (R, S) mask of samples sent to the field
    field_cache: object = None
    background: tuple = (1.0, 1.0, 1.0)
    extras: dict = field(default_factory=dict)


def _inside_box(pos, bbox):
    lo = np.asarray(bbox[0], dtype=pos.dtype)
    hi = np.asarray(bbox[1], dtype=pos.dtype)
    return np.all((pos >= lo) & (pos <= hi), axis=-1)


def render_rays(field, origins, directions, cfg: RenderConfig, rng_draw=None) -> RenderResult:
    """Render a batch of rays through ``field``.

    ``rng_draw`` (R, S) supplies the stratified offsets; when omitted every
    sample sits at its stratum midpoint.
    """
    origins = np.asarray(origins)
    directions = np.asarray(directions)
    dtype = directions.dtype
    n_rays, n_s = directions.shape[0], cfg.n_samples
    if rng_draw is None:
        rng_draw = np.full((n_rays, n_s), 0.5, dtype=dtype)
    t, deltas = stratified_depths(cfg.near, cfg.far, n_s, np.asarray(rng_draw, dtype=dtype))
    pos = origins[:, None, :] + t[..., None] * directions[:, None, :]
    sigmas = np.zeros((n_rays, n_s), dtype=dtype)
    colors = np.zeros((n_rays, n_s, 3), dtype=dtype)
    inside = None
    if cfg.bbox is not None:
        inside = _inside_box(pos, cfg.bbox)
        p_in = pos[inside]
        d_in = np.broadcast_to(directions[:, None, :], pos.shape)[inside]
    else:
        p_in = pos.reshape(-1, 3)
        d_in = np.broadcast_to(directions[:, None, :], pos.shape).reshape(-1, 3)
    cache = None
    if len(p_in):
        s_in, c_in, cache = field.query(p_in, d_in)
        if inside is not None:
            sigmas[inside] = s_in
            colors[inside] = c_in
        else:
            sigmas[...] = s_in.reshape(n_rays, n_s)
            colors[...] = c_in.reshape(n_rays, n_s, 3)
    out = composite(sigmas, colors, deltas, cfg.background, t_values=t)
    return RenderResult(out.pixel_color, sigmas, colors, deltas, t, out, inside, cache, cfg.background)


def render_rays_backward(field, res: RenderResult, d_rgb, d_sigma_extra=None) -> dict:
    """Parameter gradients for a loss with dL/d(rgb) and optional direct dL/d(sigma)."""
    d_sigma, d_colors = composite_backward(
        res.sigmas, res.colors, res.deltas, res.background, d_rgb, out=res.composite
    )
    if d_sigma_extra is not None:
        d_sigma = d_sigma + d_sigma_extra
    if res.field_cache is None:
        return {k: np.zeros_like(v) for k, v in field.params.items()}
    if res.inside is not None:
        return field.backward(res.field_cache, d_sigma[res.inside], d_colors[res.inside])
    return field.backward(res.field_cache, d_sigma.reshape(-1), d_colors.reshape(-1, 3))


def render_image(field, camera: Camera, cfg: RenderConfig, rng=None, threads: int = 1, dtype=np.float32):
    """Render a full H x W x 3 image, clamped to [0, 1].

    With ``jitter_mode == "midpoint"`` the result is deterministic; in
    stratified mode ``rng`` (a numpy Generator) supplies the offsets.
    """
    origins, dirs = camera_rays(camera, dtype=dtype)
    n = len(dirs)
    if cfg.jitter_mode == "stratified":
        rng = rng if rng is not None else np.random.default_rng(0)
        draws = rng.random((n, cfg.n_samples)).astype(dtype)
    else:
        draws = None
    chunks = [slice(i, min(i + cfg.chunk, n)) for i in range(0, n, cfg.chunk)]

    def run(sl):
        d = None if draws is None else draws[sl]
        return render_rays(field, origins[sl], dirs[sl], cfg, d).rgb

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    img = np.concatenate(parts, axis=0).reshape(camera.height, camera.width, 3)
    return np.clip(img, 0.0, 1.0)
