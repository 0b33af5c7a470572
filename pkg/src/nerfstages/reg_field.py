"""Frequency-regularised coordinate network used as the sparse-view model.

The network sees positionally encoded coordinates whose higher frequency
bands are faded in over training (``frequency_mask``), and training adds a
penalty on density in the first few samples of every ray
(``occlusion_loss``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MaskLengthMismatch, TooFewSamples
from .field import RadianceField, check_cache, check_finite, register


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 6
    L_dir: int = 2
    include_identity: bool = True

    def __post_init__(self):
        if self.L_pos < 1 or self.L_dir < 0:
            raise ValueError("need L_pos >= 1 and L_dir >= 0")

    def pos_dim(self, dim: int = 3) -> int:
        return dim * (int(self.include_identity) + 2 * self.L_pos)

    def dir_dim(self, dim: int = 3) -> int:
        return dim * (int(self.include_identity) + 2 * self.L_dir)


def positional_encoding(x, n_bands: int, mask=None, include_identity: bool = True):
    """Sinusoidal encoding ``[x, m_k sin(2^k pi x), m_k cos(2^k pi x)]_k``.

    Bands are laid out band-major: for each k the sin block (one entry per
    input dimension) precedes the cos block.
    """
    x = np.asarray(x)
    if mask is None:
        mask = np.ones(n_bands, dtype=x.dtype)
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != (n_bands,):
        raise MaskLengthMismatch(f"mask has {mask.size} entries for {n_bands} bands")
    D = x.shape[-1]
    off = D if include_identity else 0
    out = np.empty(x.shape[:-1] + (off + 2 * n_bands * D,), dtype=x.dtype)
    if include_identity:
        out[..., :D] = x
    if n_bands:
        freqs = (2.0 ** np.arange(n_bands, dtype=x.dtype)) * x.dtype.type(np.pi)
        ang = x[..., None, :] * freqs[:, None]  # (..., L, D)
        band = out[..., off:].reshape(x.shape[:-1] + (n_bands, 2, D))
        np.sin(ang, out=band[..., 0, :])
        np.cos(ang, out=band[..., 1, :])
        if not np.all(mask == 1):
            band *= mask[:, None, None]
    return out


def frequency_mask(t, T_ramp, L: int) -> np.ndarray:
    """Per-band weights ``clip(L * t / T_ramp - k, 0, 1)``.

    Band k is fully open once the ramp position passes k + 1, partially open
    while it is between k and k + 1, and closed before that.
    """
    if T_ramp < 1:
        raise ValueError("T_ramp must be >= 1")
    pos = L * min(float(t), float(T_ramp)) / T_ramp
    return np.clip(pos - np.arange(L, dtype=np.float64), 0.0, 1.0)


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def occlusion_loss(sigmas, K: int):
    """Mean density over the first ``K`` samples of each ray.

    Returns:
        (loss, grad) with grad shaped like ``sigmas``.
    """
    sigmas = np.asarray(sigmas)
    if sigmas.ndim == 1:
        sigmas = sigmas[None]
    if sigmas.shape[-1] < K:
        raise TooFewSamples(f"rays have {sigmas.shape[-1]} samples, need {K}")
    n_rays = sigmas.shape[0]
    loss = float(sigmas[:, :K].mean())
    grad = np.zeros_like(sigmas)
    grad[:, :K] = 1.0 / (K * n_rays)
    return loss, grad


class _Cache:
    __slots__ = ("owner", "n", "inputs", "hidden", "z_sigma", "rgb", "enc_d")

    def __init__(self, owner, n):
        self.owner = owner
        self.n = n


@register
class CoordinateNetwork(RadianceField):
    """ReLU MLP on encoded positions with a density and a color head.

    Density comes from the last hidden layer through softplus; color from
    the last hidden layer concatenated with the encoded view direction,
    through a sigmoid.
    """

    kind = "coordnet"

    def __init__(
        self,
        hidden=(64, 64, 64, 64),
        L_pos: int = 6,
        L_dir: int = 2,
        include_identity: bool = True,
        ramp_steps: int = 0,
        mask_directions: bool = False,
        seed: int = 0,
        dtype: str = "float64",
    ):
        super().__init__()
        self.hidden = tuple(int(h) for h in hidden)
        self.enc = EncodingConfig(L_pos, L_dir, include_identity)
        self.ramp_steps = int(ramp_steps)
        self.mask_directions = bool(mask_directions)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.step = 0
        self._init_params()

    def config(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "L_pos": self.enc.L_pos,
            "L_dir": self.enc.L_dir,
            "include_identity": self.enc.include_identity,
            "ramp_steps": self.ramp_steps,
            "mask_directions": self.mask_directions,
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        widths = [self.enc.pos_dim()] + list(self.hidden)

        def he(fan_in, fan_out):
            lim = np.sqrt(6.0 / fan_in)
            return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(self.dtype)

        p = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            p[f"W{i}"] = he(a, b)
            p[f"b{i}"] = np.zeros(b, dtype=self.dtype)
        feat = widths[-1]
        p["W_sigma"] = he(feat, 1)
        p["b_sigma"] = np.zeros(1, dtype=self.dtype)
        p["W_rgb"] = he(feat + self.enc.dir_dim(), 3)
        p["b_rgb"] = np.zeros(3, dtype=self.dtype)
        self.params = p

    def set_step(self, step: int) -> None:
        self.step = int(step)

    def position_mask(self) -> np.ndarray:
        if self.ramp_steps <= 0:
            return np.ones(self.enc.L_pos)
        return frequency_mask(self.step, self.ramp_steps, self.enc.L_pos)

    def direction_mask(self) -> np.ndarray:
        if self.ramp_steps <= 0 or not self.mask_directions or self.enc.L_dir == 0:
            return np.ones(self.enc.L_dir)
        return frequency_mask(self.step, self.ramp_steps, self.enc.L_dir)

    def query(self, positions, directions, mask=None):
        p = self.params
        x = np.asarray(positions, dtype=self.dtype)
        d = np.asarray(directions, dtype=self.dtype)
        check_finite(x, d)
        mask = self.position_mask() if mask is None else mask
        h = positional_encoding(x, self.enc.L_pos, mask, self.enc.include_identity)
        enc_d = positional_encoding(d, self.enc.L_dir, self.direction_mask(), self.enc.include_identity)
        cache = _Cache(self, len(x))
        inputs, hidden = [], []
        for i in range(len(self.hidden)):
            inputs.append(h)
            h = h @ p[f"W{i}"]
            h += p[f"b{i}"]
            np.maximum(h, 0.0, out=h)
            hidden.append(h)
        z_sigma = (h @ p["W_sigma"])[:, 0] + p["b_sigma"][0]
        feat = np.concatenate([h, enc_d], axis=-1)
        rgb = sigmoid(feat @ p["W_rgb"] + p["b_rgb"])
        cache.inputs = inputs + [h]
        cache.hidden = hidden
        cache.z_sigma = z_sigma
        cache.rgb = rgb
        cache.enc_d = enc_d
        return softplus(z_sigma), rgb, cache

    def backward(self, cache, d_sigma, d_rgb) -> dict:
        check_cache(cache, self, len(d_sigma))
        p = self.params
        g = {}
        h_last = cache.inputs[-1]
        dz_sigma = (np.asarray(d_sigma, dtype=self.dtype) * sigmoid(cache.z_sigma))[:, None]
        dz_rgb = np.asarray(d_rgb, dtype=self.dtype) * cache.rgb * (1.0 - cache.rgb)
        # late in training upstream gradients are tiny and the chain below goes
        # subnormal, which makes float32 matmuls several times slower. Rescale by
        # a power of two (exact) so the largest entry is near 1, undo at the end.
        peak = max(float(np.abs(dz_sigma).max(initial=0.0)), float(np.abs(dz_rgb).max(initial=0.0)))
        scale = 2.0 ** min(-int(np.frexp(peak)[1]), 100) if peak > 0 else 1.0
        dz_sigma *= self.dtype.type(scale)
        dz_rgb *= self.dtype.type(scale)
        # entries 2^-64 below the peak cannot move any sum; drop them so the
        # products further down stay in the normal range
        floor = 2.0 ** -64
        dz_sigma[np.abs(dz_sigma) < floor] = 0.0
        dz_rgb[np.abs(dz_rgb) < floor] = 0.0
        feat = np.concatenate([h_last, cache.enc_d], axis=-1)
        g["W_rgb"] = feat.T @ dz_rgb
        g["b_rgb"] = dz_rgb.sum(axis=0)
        g["W_sigma"] = h_last.T @ dz_sigma
        g["b_sigma"] = dz_sigma.sum(axis=0)
        n_feat = h_last.shape[1]
        dh = dz_sigma @ p["W_sigma"].T + dz_rgb @ p["W_rgb"][:n_feat].T
        for i in reversed(range(len(self.hidden))):
            dpre = dh
            dpre *= cache.hidden[i] > 0
            g[f"W{i}"] = cache.inputs[i].T @ dpre
            g[f"b{i}"] = dpre.sum(axis=0)
            if i:
                dh = dpre @ p[f"W{i}"].T
        inv = self.dtype.type(1.0 / scale)
        return {k: g[k] * inv for k in p}
