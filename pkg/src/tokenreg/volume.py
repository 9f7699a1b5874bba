"""Grid data types and the VOL1 on-disk format.

Arrays are stored z-major: a volume with dims ``(nx, ny, nz)`` holds a numpy
array of shape ``(nz, ny, nx)`` so that C-order iteration has x fastest.
Displacement fields carry a trailing channel axis ``(nz, ny, nx, 3)`` with
channel order ``(ux, uy, uz)`` in voxel units.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

MAGIC = b"VOL1"
HEADER = struct.Struct("<4s3IIB3x")
HEADER_SIZE = HEADER.size  # 24

DTYPE_F32 = 0
DTYPE_U32 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U32: np.dtype("<u4")}


class VolumeError(ValueError):
    """Base class for volume validation and format errors."""


class BadMagicError(VolumeError):
    pass


class TruncatedPayloadError(VolumeError):
    pass


class ZeroDimensionError(VolumeError):
    pass


class UnknownDtypeError(VolumeError):
    pass


class DtypeMismatchError(VolumeError):
    pass


class GeometryMismatchError(VolumeError):
    pass


@dataclass(frozen=True)
class VolumeGeometry:
    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3:
            raise VolumeError(f"geometry needs 3 dims, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ZeroDimensionError(f"zero dimension in {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @classmethod
    def from_shape(cls, shape) -> "VolumeGeometry":
        nz, ny, nx = shape[:3]
        return cls((nx, ny, nz))

    def check_divisible(self, factor: int = 8) -> None:
        bad = [d for d in self.dims if d % factor]
        if bad:
            raise VolumeError(f"dims {self.dims} must each be divisible by {factor}")

    def scaled(self, factor: float) -> "VolumeGeometry":
        return VolumeGeometry(tuple(int(round(d * factor)) for d in self.dims))


def _require_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"{what} contains non-finite values")


class ScalarVolume:
    """Single-channel float32 intensity volume."""

    channels = 1
    dtype_code = DTYPE_F32

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if geometry is None:
            geometry = VolumeGeometry.from_shape(data.shape)
        if data.shape != geometry.shape:
            raise VolumeError(f"data shape {data.shape} does not match geometry {geometry.shape}")
        _require_finite(data, "ScalarVolume")
        data.setflags(write=False)
        self.geometry = geometry
        self.data = data

    def __eq__(self, other):
        return (
            type(other) is type(self)
            and other.geometry == self.geometry
            and np.array_equal(other.data, self.data)
        )

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.geometry.dims})"


class LabelVolume(ScalarVolume):
    """Integer label map; label 0 is background."""

    dtype_code = DTYPE_U32

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.ascontiguousarray(data, dtype=np.uint32)
        if geometry is None:
            geometry = VolumeGeometry.from_shape(data.shape)
        if data.shape != geometry.shape:
            raise VolumeError(f"data shape {data.shape} does not match geometry {geometry.shape}")
        data.setflags(write=False)
        self.geometry = geometry
        self.data = data

    def labels(self) -> set[int]:
        return {int(v) for v in np.unique(self.data)}


class DisplacementField(ScalarVolume):
    """Per-voxel displacement ``(ux, uy, uz)`` in voxel units."""

    channels = 3

    def __init__(self, data, geometry: VolumeGeometry | None = None):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise VolumeError(f"field data must have shape (nz, ny, nx, 3), got {data.shape}")
        if geometry is None:
            geometry = VolumeGeometry.from_shape(data.shape)
        if data.shape[:3] != geometry.shape:
            raise VolumeError(f"data shape {data.shape} does not match geometry {geometry.shape}")
        _require_finite(data, "DisplacementField")
        data.setflags(write=False)
        self.geometry = geometry
        self.data = data

    @classmethod
    def zeros(cls, geometry: VolumeGeometry) -> "DisplacementField":
        return cls(np.zeros(geometry.shape + (3,), np.float32), geometry)


AnyVolume = Union[ScalarVolume, LabelVolume, DisplacementField]


def write_volume(obj: AnyVolume, path) -> None:
    nx, ny, nz = obj.geometry.dims
    header = HEADER.pack(MAGIC, nx, ny, nz, obj.channels, obj.dtype_code)
    payload = obj.data.astype(_DTYPES[obj.dtype_code], copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path, kind: type | None = None) -> AnyVolume:
    """Read a VOL1 file.

    ``kind`` optionally pins the expected type; a file whose header encodes a
    different type raises :class:`DtypeMismatchError`.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{os.fspath(path)}: bad magic")
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{os.fspath(path)}: truncated header")
    _, nx, ny, nz, channels, code = HEADER.unpack_from(raw)
    if 0 in (nx, ny, nz):
        raise ZeroDimensionError(f"{os.fspath(path)}: zero dimension in {(nx, ny, nz)}")
    if code not in _DTYPES:
        raise UnknownDtypeError(f"{os.fspath(path)}: unknown dtype code {code}")
    if channels == 1:
        cls = LabelVolume if code == DTYPE_U32 else ScalarVolume
    elif channels == 3 and code == DTYPE_F32:
        cls = DisplacementField
    else:
        raise VolumeError(f"{os.fspath(path)}: unsupported channels={channels} dtype={code}")
    if kind is not None and cls is not kind:
        raise DtypeMismatchError(
            f"{os.fspath(path)}: dtype mismatch, file holds {cls.__name__}, expected {kind.__name__}"
        )

    dtype = _DTYPES[code]
    count = nx * ny * nz * channels
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{os.fspath(path)}: truncated payload ({len(raw)} of {expected} bytes)"
        )
    if len(raw) > expected:
        raise VolumeError(f"{os.fspath(path)}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=HEADER_SIZE)
    geometry = VolumeGeometry((nx, ny, nz))
    shape = geometry.shape + ((3,) if channels == 3 else ())
    return cls(data.reshape(shape).astype(dtype.newbyteorder("="), copy=True), geometry)


def _axis_linear(n_src: int, n_tgt: int):
    scale = n_src / n_tgt
    src = (np.arange(n_tgt) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, src - lo


def _axis_nearest(n_src: int, n_tgt: int):
    scale = n_src / n_tgt
    src = (np.arange(n_tgt) + 0.5) * scale - 0.5
    return np.clip(np.floor(src + 0.5), 0, n_src - 1).astype(np.intp)


def resample_volume(v, target: VolumeGeometry, mode: str = "trilinear"):
    """Resample onto ``target`` using voxel-centre alignment.

    Source coordinate for target index t along an axis is
    ``(t + 0.5) * n_src / n_tgt - 0.5``, clamped to the source extent.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if isinstance(v, LabelVolume) and mode != "nearest":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    if target == v.geometry:
        return type(v)(v.data.copy(), target)

    out = v.data
    if mode == "nearest":
        for axis, (n_src, n_tgt) in enumerate(zip(v.geometry.shape, target.shape)):
            out = np.take(out, _axis_nearest(n_src, n_tgt), axis=axis)
        return type(v)(out, target)

    out = out.astype(np.float64)
    for axis, (n_src, n_tgt) in enumerate(zip(v.geometry.shape, target.shape)):
        lo, hi, frac = _axis_linear(n_src, n_tgt)
        shape = [1] * out.ndim
        shape[axis] = n_tgt
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        # lerp form keeps constants exact
        out = a + frac.reshape(shape) * (b - a)
    return type(v)(out.astype(np.float32), target)
