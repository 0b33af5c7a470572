"""The radiance-field role shared by both models, plus checkpoint I/O.

A checkpoint is a small versioned binary container::

    magic   b"NSCK"
    u32     format version (little endian)
    u64     header length in bytes
    bytes   UTF-8 JSON header: {"kind", "config", "meta", "arrays": [{name, dtype, shape}]}
    bytes   raw little-endian array data, concatenated in header order

Array bytes are written verbatim so loading is bit-exact, and nothing
time-dependent goes into the file, so equal parameters give equal bytes.
"""

from __future__ import annotations

import abc
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CacheMismatch, CheckpointCorrupt, NonFiniteInput

MAGIC = b"NSCK"
FORMAT_VERSION = 1


class RadianceField(abc.ABC):
    """Maps (position, direction) to (density, color) with parameter gradients.

    Subclasses keep trainable arrays in ``self.params`` (name -> float array)
    and implement ``query``/``backward``. ``query`` returns an opaque cache
    that ``backward`` consumes.
    """

    kind: str = "abstract"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    @abc.abstractmethod
    def query(self, positions, directions):
        """Returns (sigma (N,), rgb (N, 3), cache)."""

    @abc.abstractmethod
    def backward(self, cache, d_sigma, d_rgb) -> dict:
        """Returns a dict of gradients shaped like ``self.params``."""

    @abc.abstractmethod
    def config(self) -> dict:
        """JSON-serialisable constructor arguments."""

    @classmethod
    def from_config(cls, cfg: dict):
        return cls(**cfg)

    def set_step(self, step: int) -> None:
        """Hook for step-dependent behaviour (e.g. frequency masks)."""

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        if hasattr(self, "dtype"):
            self.dtype = np.dtype(dtype)
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self

    def copy(self):
        other = type(self).from_config(self.config())
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.set_step(getattr(self, "step", 0))
        return other


def check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("non-finite input to field")


def check_cache(cache, owner, n):
    if getattr(cache, "owner", None) is not owner or cache.n != n:
        raise CacheMismatch("forward cache does not belong to this field/batch")


_REGISTRY: dict[str, type] = {}


def register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def field_class(kind: str) -> type:
    if kind not in _REGISTRY:
        from . import fast_field, reg_field  # noqa: F401  (populate registry)
    if kind not in _REGISTRY:
        raise KeyError(f"unknown field kind {kind!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[kind]


def dumps_checkpoint(fld: RadianceField, meta: dict | None = None) -> bytes:
    names = list(fld.params)
    arrays = [np.ascontiguousarray(fld.params[k]) for k in names]
    header = {
        "kind": fld.kind,
        "config": fld.config(),
        "meta": meta or {},
        "arrays": [
            {"name": k, "dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape)}
            for k, a in zip(names, arrays)
        ],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for a in arrays:
        buf.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes):
    """Inverse of :func:`dumps_checkpoint`; returns (field, meta)."""
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointCorrupt("bad magic; not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointCorrupt(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        cls = field_class(header["kind"])
        fld = cls.from_config(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorrupt(f"unreadable checkpoint header: {exc}") from exc
    off = 16 + hlen
    params = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if off + nbytes > len(data):
            raise CheckpointCorrupt("checkpoint truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(spec["shape"])
        params[spec["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += nbytes
    if off != len(data):
        raise CheckpointCorrupt("trailing bytes after checkpoint payload")
    if set(params) != set(fld.params):
        raise CheckpointCorrupt("checkpoint parameters do not match field layout")
    fld.params = params
    meta = header.get("meta", {})
    if "step" in meta:
        fld.set_step(int(meta["step"]))
    return fld, meta


def save_checkpoint(fld: RadianceField, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(fld, meta))
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointCorrupt(str(exc)) from exc
    return loads_checkpoint(data)
