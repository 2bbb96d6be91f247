"""3D grid types, axial slicing, nearest-neighbour resampling and VBV/VBM I/O.

Voxel order is row-major with d slowest and w fastest.  Axial slices run along
the leading (D) axis.  On disk everything is little-endian regardless of host.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"VBV1"
MASK_MAGIC = b"VBM1"
_HEADER = struct.Struct("<4s3I3f")
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """Base class for malformed VBV/VBM files."""


class BadMagicError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class NonFiniteVoxelError(VolumeFormatError):
    pass


def _freeze(a):
    a.setflags(write=False)
    return a


def _check_dims(dims):
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3 or any(x <= 0 for x in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense float32 grid of shape (D, H, W) with mm spacing."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if a.ndim != 3 or a.size == 0:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise NonFiniteVoxelError("volume contains NaN or Inf voxels")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(not s > 0 for s in sp):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        object.__setattr__(self, "data", _freeze(a))
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self):
        return self.data.shape

    @property
    def voxels(self):
        return self.data.reshape(-1)

    def __call__(self, d, i, j):
        return self.data[d, i, j]

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.dims == other.dims
                and self.spacing == other.spacing
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary grid stored as uint8 {0, 1}."""

    bits: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.asarray(self.bits)
        if a.ndim != 3 or a.size == 0:
            raise ValueError(f"mask must be a non-empty 3D array, got shape {a.shape}")
        if a.dtype != np.bool_ and not np.isin(a, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "bits", _freeze(np.array(a != 0, dtype=np.uint8, order="C")))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.bits.shape

    @property
    def count(self):
        return int(self.bits.sum())

    def as_bool(self):
        return self.bits.astype(bool)

    def __eq__(self, other):
        return (isinstance(other, Mask) and self.dims == other.dims
                and np.array_equal(self.bits, other.bits))


@dataclass(frozen=True, eq=False)
class PriorMap:
    """Per-voxel probability grid with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        a = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if a.ndim != 3:
            raise ValueError(f"prior map must be 3D, got shape {a.shape}")
        if not np.isfinite(a).all() or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
            raise ValueError("prior map values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(a))

    @property
    def dims(self):
        return self.values.shape

    def binarize(self, tau):
        return Mask(self.values > tau)


@dataclass(frozen=True)
class SliceStack:
    slices: tuple = field(default_factory=tuple)

    @property
    def count(self):
        return len(self.slices)


def axial_slices(v: Volume) -> SliceStack:
    return SliceStack(tuple(v.data[d] for d in range(v.dims[0])))


def restack(stack: SliceStack, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.stack(stack.slices, axis=0), spacing)


def nearest_indices(n_in, n_out):
    """Source index for each output index, matching voxel centres.

    Output centre i sits at source coordinate (i + 0.5) * n_in / n_out - 0.5;
    ties round toward the lower index.  Integer arithmetic keeps it exact.
    """
    i = np.arange(n_out, dtype=np.int64)
    num = (2 * i + 1) * n_in - 2 * n_out
    den = 2 * n_out
    src = -((-num) // den)  # ceil
    return np.clip(src, 0, n_in - 1)


def resample_grid(a, new_dims):
    new_dims = _check_dims(new_dims)
    idx = [nearest_indices(n, m) for n, m in zip(a.shape, new_dims)]
    return a[np.ix_(*idx)]


def resample_nearest(v, new_dims):
    """Nearest-neighbour resample of a Volume or Mask to ``new_dims``."""
    if isinstance(v, Mask):
        return Mask(resample_grid(v.bits, new_dims), v.spacing)
    out = resample_grid(v.data, new_dims)
    scale = [a / b for a, b in zip(v.dims, out.shape)]
    return Volume(out, tuple(s * f for s, f in zip(v.spacing, scale)))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _encode(magic, dims, spacing, payload):
    d, h, w = dims
    return _HEADER.pack(magic, d, h, w, *spacing) + payload


def _decode(buf, magic, itemsize):
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than header")
    _, d, h, w, sd, sh, sw = _HEADER.unpack_from(buf)
    if d == 0 or h == 0 or w == 0:
        raise DimensionOverflowError(f"zero dimension in header: {(d, h, w)}")
    n = d * h * w
    if n > MAX_VOXELS:
        raise DimensionOverflowError(f"{d}x{h}x{w} exceeds the {MAX_VOXELS} voxel limit")
    need = _HEADER.size + n * itemsize
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - _HEADER.size} bytes, need {n * itemsize}")
    if len(buf) > need:
        raise VolumeFormatError(f"{len(buf) - need} trailing bytes after payload")
    return (d, h, w), (sd, sh, sw), buf[_HEADER.size:need]


def volume_to_bytes(v: Volume) -> bytes:
    return _encode(VOLUME_MAGIC, v.dims, v.spacing, v.data.astype("<f4").tobytes())


def volume_from_bytes(buf: bytes) -> Volume:
    dims, spacing, payload = _decode(buf, VOLUME_MAGIC, 4)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.isfinite(arr).all():
        raise NonFiniteVoxelError("NaN or Inf voxel in payload")
    return Volume(arr.astype(np.float32), spacing)


def mask_to_bytes(m: Mask) -> bytes:
    return _encode(MASK_MAGIC, m.dims, m.spacing, m.bits.tobytes())


def mask_from_bytes(buf: bytes) -> Mask:
    dims, spacing, payload = _decode(buf, MASK_MAGIC, 1)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if arr.max(initial=0) > 1:
        raise VolumeFormatError("mask payload holds values other than 0/1")
    return Mask(arr, spacing)


def save_volume(v: Volume, path):
    Path(path).write_bytes(volume_to_bytes(v))


def load_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


def save_mask(m: Mask, path):
    Path(path).write_bytes(mask_to_bytes(m))


def load_mask(path) -> Mask:
    return mask_from_bytes(Path(path).read_bytes())
