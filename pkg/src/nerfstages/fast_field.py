"""Grid-based fast radiance fields.

``VMGrid`` stores density and appearance as sums of (plane x line) factor
products over the three axis pairings; ``DenseGrid`` stores per-voxel
logits directly. Both sample with align-corners linear interpolation over
an axis-aligned box and return zero density outside it.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ShrinkNotSupported
from .field import RadianceField, check_cache, check_finite, register
from .reg_field import positional_encoding, sigmoid, softplus

# (plane axes, line axis) for the three pairings
MAT_MODES = ((0, 1), (0, 2), (1, 2))
VEC_MODES = (2, 1, 0)


def _axis_coords(u, res):
    """Lower node index and fractional offset for normalised coordinate u."""
    g = u * (res - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    return i0, g - i0


def _in_unit_box(points):
    return np.all((points >= 0.0) & (points <= 1.0), axis=-1)


def trilinear_sample(values, points):
    """Trilinear interpolation of a node grid at normalised points.

    Args:
        values: (X, Y, Z) or (X, Y, Z, C) node values; node (i, j, k) sits at
            normalised position (i/(X-1), j/(Y-1), k/(Z-1)).
        points: (N, 3) coordinates in [0, 1]^3. Points outside the unit box
            get value 0 and no gradient.

    Returns:
        (out, layout) where layout = (flat corner indices (N, 8), corner
        weights (N, 8)) is what :func:`trilinear_backward` needs.
    """
    values = np.asarray(values)
    points = np.asarray(points)
    squeeze = values.ndim == 3
    if squeeze:
        values = values[..., None]
    X, Y, Z, C = values.shape
    inside = _in_unit_box(points)
    pts = np.where(inside[:, None], points, 0.0)
    ix, fx = _axis_coords(pts[:, 0], X)
    iy, fy = _axis_coords(pts[:, 1], Y)
    iz, fz = _axis_coords(pts[:, 2], Z)
    idx = np.empty((len(points), 8), dtype=np.int64)
    w = np.empty((len(points), 8), dtype=np.result_type(values.dtype, points.dtype))
    c = 0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                idx[:, c] = ((ix + dx) * Y + (iy + dy)) * Z + (iz + dz)
                w[:, c] = wx * wy * wz
                c += 1
    w[~inside] = 0.0
    flat = values.reshape(-1, C)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    if squeeze:
        out = out[:, 0]
    return out, (idx, w)


def trilinear_backward(layout, upstream, shape):
    """Scatter dL/d(sampled value) back onto grid nodes of ``shape``."""
    idx, w = layout
    upstream = np.asarray(upstream)
    n_nodes = int(np.prod(shape[:3]))
    if upstream.ndim == 1:
        return np.bincount(idx.ravel(), (w * upstream[:, None]).ravel(), minlength=n_nodes).reshape(shape)
    C = upstream.shape[1]
    out = np.empty((n_nodes, C), dtype=upstream.dtype)
    for ch in range(C):
        out[:, ch] = np.bincount(idx.ravel(), (w * upstream[:, ch, None]).ravel(), minlength=n_nodes)
    return out.reshape(shape)


def _resample_axis(arr, axis, new_n):
    """Align-corners linear resampling of ``arr`` along ``axis``."""
    old_n = arr.shape[axis]
    if new_n == old_n:
        return arr.copy()
    u = np.linspace(0.0, 1.0, new_n)
    i0, f = _axis_coords(u, old_n)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new_n
    f = f.reshape(shape).astype(arr.dtype)
    return a * (1.0 - f) + b * f


def _normalise(fld, positions):
    lo = np.asarray(fld.bbox[0], dtype=fld.dtype)
    hi = np.asarray(fld.bbox[1], dtype=fld.dtype)
    return (positions - lo) / (hi - lo)


class _Cache:
    def __init__(self, owner, n):
        self.owner = owner
        self.n = n


@register
class VMGrid(RadianceField):
    """Vector-matrix factorised radiance field.

    Density feature at a point is ``sum_m sum_r plane_m[r](a, b) * line_m[r](c)``
    over the pairings in ``MAT_MODES``/``VEC_MODES``; density is
    ``softplus(feature - density_shift)``. Appearance uses the same layout,
    projected by ``basis`` to ``app_dim`` features which, with the encoded
    view direction, feed one linear layer and a sigmoid.
    """

    kind = "vm"

    def __init__(
        self,
        resolution=64,
        bbox=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
        density_rank: int = 8,
        app_rank: int = 8,
        app_dim: int = 12,
        L_dir: int = 2,
        density_shift: float = 10.0,
        init_scale: float = 0.1,
        seed: int = 0,
        dtype: str = "float64",
    ):
        super().__init__()
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        self.resolution = tuple(int(r) for r in res)
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        self.bbox = (tuple(float(v) for v in bbox[0]), tuple(float(v) for v in bbox[1]))
        self.density_rank = int(density_rank)
        self.app_rank = int(app_rank)
        self.app_dim = int(app_dim)
        self.L_dir = int(L_dir)
        self.density_shift = float(density_shift)
        self.init_scale = float(init_scale)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._init_params()

    def config(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "bbox": [list(self.bbox[0]), list(self.bbox[1])],
            "density_rank": self.density_rank,
            "app_rank": self.app_rank,
            "app_dim": self.app_dim,
            "L_dir": self.L_dir,
            "density_shift": self.density_shift,
            "init_scale": self.init_scale,
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    @property
    def dir_dim(self) -> int:
        return 3 * (1 + 2 * self.L_dir)

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        s = self.init_scale
        p = {}
        for prefix, rank in (("density", self.density_rank), ("app", self.app_rank)):
            for m, ((a, b), c) in enumerate(zip(MAT_MODES, VEC_MODES)):
                ra, rb, rc = self.resolution[a], self.resolution[b], self.resolution[c]
                p[f"{prefix}_plane{m}"] = (s * rng.standard_normal((rank, ra, rb))).astype(self.dtype)
                p[f"{prefix}_line{m}"] = (s * rng.standard_normal((rank, rc))).astype(self.dtype)
        n_app = 3 * self.app_rank
        p["basis"] = (rng.uniform(-1, 1, (n_app, self.app_dim)) * np.sqrt(3.0 / n_app)).astype(self.dtype)
        fan_in = self.app_dim + self.dir_dim
        p["W_rgb"] = (rng.uniform(-1, 1, (fan_in, 3)) * np.sqrt(3.0 / fan_in)).astype(self.dtype)
        p["b_rgb"] = np.zeros(3, dtype=self.dtype)
        self.params = p

    # -- factor sampling ------------------------------------------------
    # Interpolation is expressed as sparse (points x nodes) matrices: one
    # product gathers every rank at once and the transpose scatters gradients.
    def _interp_matrices(self, u):
        n = len(u)
        coords = [_axis_coords(u[:, ax], self.resolution[ax]) for ax in range(3)]
        mats = []
        for (a, b), c in zip(MAT_MODES, VEC_MODES):
            ia, fa = coords[a]
            ib, fb = coords[b]
            ic, fc = coords[c]
            B = self.resolution[b]
            base = ia * B + ib
            cols = np.stack([base, base + B, base + 1, base + B + 1], axis=1)
            wts = np.stack([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb], axis=1)
            plane = sp.csr_matrix(
                (wts.ravel(), cols.ravel(), np.arange(0, 4 * n + 1, 4)),
                shape=(n, self.resolution[a] * B),
            )
            line = sp.csr_matrix(
                (np.stack([1 - fc, fc], axis=1).ravel(), np.stack([ic, ic + 1], axis=1).ravel(), np.arange(0, 2 * n + 1, 2)),
                shape=(n, self.resolution[c]),
            )
            mats.append((plane, line))
        return mats

    def _stacked(self, m, what):
        # (nodes, density_rank + app_rank) view of both factor sets for pairing m
        d = self.params[f"density_{what}{m}"]
        a = self.params[f"app_{what}{m}"]
        return np.concatenate([d.reshape(len(d), -1), a.reshape(len(a), -1)], axis=0).T

    def _sample(self, mats):
        """Per pairing: (plane values, line values), each (n, Rd + Ra)."""
        return [(S @ self._stacked(m, "plane"), T @ self._stacked(m, "line")) for m, (S, T) in enumerate(mats)]

    # -- field interface ---------------------------------------------------
    def density_feature(self, positions):
        """Raw (pre-softplus, unshifted) density feature; zero outside the box."""
        u = _normalise(self, np.asarray(positions, dtype=self.dtype))
        inside = _in_unit_box(u)
        out = np.zeros(len(u), dtype=self.dtype)
        Rd = self.density_rank
        for pv, lv in self._sample(self._interp_matrices(u[inside])):
            out[inside] += np.sum(pv[:, :Rd] * lv[:, :Rd], axis=1)
        return out

    def query(self, positions, directions):
        x = np.asarray(positions, dtype=self.dtype)
        d = np.asarray(directions, dtype=self.dtype)
        check_finite(x, d)
        n = len(x)
        u = _normalise(self, x)
        inside = _in_unit_box(u)
        mats = self._interp_matrices(u[inside])
        samples = self._sample(mats)
        Rd = self.density_rank
        z = sum(np.sum(pv[:, :Rd] * lv[:, :Rd], axis=1) for pv, lv in samples)
        app_feat = np.concatenate([pv[:, Rd:] * lv[:, Rd:] for pv, lv in samples], axis=1)
        f = app_feat @ self.params["basis"]
        enc_d = positional_encoding(d[inside], self.L_dir)
        feat = np.concatenate([f, enc_d], axis=1)
        rgb_in = sigmoid(feat @ self.params["W_rgb"] + self.params["b_rgb"])
        zs = z - self.density_shift
        sigma = np.zeros(n, dtype=self.dtype)
        rgb = np.zeros((n, 3), dtype=self.dtype)
        sigma[inside] = softplus(zs)
        rgb[inside] = rgb_in
        cache = _Cache(self, n)
        cache.inside = inside
        cache.mats = mats
        cache.samples = samples
        cache.zs = zs
        cache.app_feat = app_feat
        cache.feat = feat
        cache.rgb = rgb_in
        return sigma, rgb, cache

    def backward(self, cache, d_sigma, d_rgb) -> dict:
        check_cache(cache, self, len(d_sigma))
        p = self.params
        inside = cache.inside
        d_sigma = np.asarray(d_sigma, dtype=self.dtype)[inside]
        d_rgb = np.asarray(d_rgb, dtype=self.dtype)[inside]
        g = {}
        dz_rgb = d_rgb * cache.rgb * (1.0 - cache.rgb)
        g["W_rgb"] = cache.feat.T @ dz_rgb
        g["b_rgb"] = dz_rgb.sum(axis=0)
        df = dz_rgb @ p["W_rgb"][: self.app_dim].T
        g["basis"] = cache.app_feat.T @ df
        d_app = df @ p["basis"].T  # (n_in, 3 * Ra)
        dz = (d_sigma * sigmoid(cache.zs))[:, None]
        Rd, Ra = self.density_rank, self.app_rank
        for m, ((S, T), (pv, lv)) in enumerate(zip(cache.mats, cache.samples)):
            dprod = np.concatenate([np.broadcast_to(dz, (len(dz), Rd)), d_app[:, m * Ra : (m + 1) * Ra]], axis=1)
            g_plane = (S.T @ (dprod * lv)).T
            g_line = (T.T @ (dprod * pv)).T
            for prefix, sl in (("density", slice(0, Rd)), ("app", slice(Rd, Rd + Ra))):
                P = p[f"{prefix}_plane{m}"]
                L = p[f"{prefix}_line{m}"]
                g[f"{prefix}_plane{m}"] = np.ascontiguousarray(g_plane[sl]).reshape(P.shape).astype(P.dtype, copy=False)
                g[f"{prefix}_line{m}"] = np.ascontiguousarray(g_line[sl]).reshape(L.shape).astype(L.dtype, copy=False)
        return {k: g[k] for k in p}


@register
class DenseGrid(RadianceField):
    """Per-voxel density and color logits with trilinear interpolation.

    Color is view-independent. Serves as the swap-in alternative fast field
    and as the reference representation in factorisation tests.
    """

    kind = "dense"

    def __init__(
        self,
        resolution=48,
        bbox=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
        density_shift: float = 10.0,
        dtype: str = "float64",
    ):
        super().__init__()
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        self.resolution = tuple(int(r) for r in res)
        self.bbox = (tuple(float(v) for v in bbox[0]), tuple(float(v) for v in bbox[1]))
        self.density_shift = float(density_shift)
        self.dtype = np.dtype(dtype)
        self.params = {"grid": np.zeros(self.resolution + (4,), dtype=self.dtype)}

    def config(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "bbox": [list(self.bbox[0]), list(self.bbox[1])],
            "density_shift": self.density_shift,
            "dtype": self.dtype.name,
        }

    def query(self, positions, directions):
        x = np.asarray(positions, dtype=self.dtype)
        check_finite(x, np.asarray(directions))
        u = _normalise(self, x)
        inside = _in_unit_box(u)
        vals, layout = trilinear_sample(self.params["grid"], u)
        sigma = np.where(inside, softplus(vals[:, 0] - self.density_shift), 0.0).astype(self.dtype)
        rgb = sigmoid(vals[:, 1:])
        rgb[~inside] = 0.0
        cache = _Cache(self, len(x))
        cache.layout = layout
        cache.inside = inside
        cache.z = vals[:, 0] - self.density_shift
        cache.rgb = rgb
        return sigma, rgb, cache

    def backward(self, cache, d_sigma, d_rgb) -> dict:
        check_cache(cache, self, len(d_sigma))
        up = np.empty((cache.n, 4), dtype=self.dtype)
        up[:, 0] = np.asarray(d_sigma) * sigmoid(cache.z)
        up[:, 1:] = np.asarray(d_rgb) * cache.rgb * (1.0 - cache.rgb)
        up[~cache.inside] = 0.0
        grid = self.params["grid"]
        return {"grid": trilinear_backward(cache.layout, up, grid.shape).astype(self.dtype)}


def upsample(grid, new_resolution):
    """Return a copy of ``grid`` with factors resampled to ``new_resolution``."""
    new_res = (new_resolution,) * 3 if np.isscalar(new_resolution) else tuple(new_resolution)
    new_res = tuple(int(r) for r in new_res)
    if any(n < o for n, o in zip(new_res, grid.resolution)):
        raise ShrinkNotSupported(f"cannot shrink {grid.resolution} to {new_res}")
    cfg = grid.config()
    cfg["resolution"] = list(new_res)
    out = type(grid).from_config(cfg)
    if isinstance(grid, VMGrid):
        params = {}
        for k, v in grid.params.items():
            if "_plane" in k:
                a, b = MAT_MODES[int(k[-1])]
                v = _resample_axis(_resample_axis(v, 1, new_res[a]), 2, new_res[b])
            elif "_line" in k:
                v = _resample_axis(v, 1, new_res[VEC_MODES[int(k[-1])]])
            else:
                v = v.copy()
            params[k] = v
    elif isinstance(grid, DenseGrid):
        v = grid.params["grid"]
        for ax in range(3):
            v = _resample_axis(v, ax, new_res[ax])
        params = {"grid": v}
    else:
        raise TypeError(f"cannot upsample {type(grid).__name__}")
    out.params = params
    return out
