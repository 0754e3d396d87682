"""Geometry containers, FOV handling, seeding and the binary tensor format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    """Incompatible or invalid geometry."""


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class PayloadMismatchError(TensorFormatError):
    pass


@dataclass(frozen=True)
class ImageGeometry:
    width: int
    height: int
    pixel_size: float = 1.0
    fov_radius: float | None = None

    def __post_init__(self):
        if self.width != self.height:
            raise GeometryError("only square grids are supported")
        if self.width < 1:
            raise GeometryError("grid must have at least one pixel")
        if self.pixel_size <= 0:
            raise GeometryError("pixel_size must be positive")
        half_extent = self.width / 2 * self.pixel_size
        if self.fov_radius is None:
            object.__setattr__(self, "fov_radius", half_extent)
        if not 0 < self.fov_radius <= half_extent * (1 + 1e-12):
            raise GeometryError(
                f"fov_radius {self.fov_radius} outside (0, {half_extent}]")

    @classmethod
    def square(cls, n: int, pixel_size: float = 1.0, fov_radius: float | None = None):
        return cls(n, n, pixel_size, fov_radius)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) of every pixel center, y pointing up (row 0 at the top)."""
        cols = (np.arange(self.width) - (self.width - 1) / 2) * self.pixel_size
        rows = ((self.height - 1) / 2 - np.arange(self.height)) * self.pixel_size
        x, y = np.meshgrid(cols, rows)
        return x, y

    def fov_mask(self) -> np.ndarray:
        x, y = self.pixel_centers()
        return x * x + y * y < self.fov_radius ** 2


def fov_pixel_list(geom: ImageGeometry) -> list[tuple[int, int]]:
    """Pixels whose center lies strictly inside the FOV circle, row-major."""
    rows, cols = np.nonzero(geom.fov_mask())
    return list(zip(rows.tolist(), cols.tolist()))


def fov_flat_indices(geom: ImageGeometry) -> np.ndarray:
    return np.flatnonzero(geom.fov_mask())


@dataclass(frozen=True)
class SinogramGeometry:
    num_angles: int
    num_bins: int
    bin_spacing: float = 1.0

    def __post_init__(self):
        if self.num_angles < 1 or self.num_bins < 1:
            raise GeometryError("num_angles and num_bins must be >= 1")
        if self.bin_spacing <= 0:
            raise GeometryError("bin_spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_angles, self.num_bins)

    @property
    def size(self) -> int:
        return self.num_angles * self.num_bins

    @property
    def radial_extent(self) -> float:
        return self.num_bins * self.bin_spacing

    def angles(self) -> np.ndarray:
        return np.arange(self.num_angles) * (math.pi / self.num_angles)

    def offsets(self) -> np.ndarray:
        return (np.arange(self.num_bins) - (self.num_bins - 1) / 2) * self.bin_spacing

    def offset_to_bin(self, s):
        return np.asarray(s) / self.bin_spacing + (self.num_bins - 1) / 2


@dataclass(frozen=True)
class ImageGrid:
    geometry: ImageGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.geometry.shape:
            raise GeometryError(
                f"values shape {values.shape} != geometry {self.geometry.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, geometry: ImageGeometry) -> ImageGrid:
        return cls(geometry, np.zeros(geometry.shape))


@dataclass(frozen=True)
class Sinogram:
    geometry: SinogramGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.geometry.shape:
            raise GeometryError(
                f"values shape {values.shape} != geometry {self.geometry.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("sinogram values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def total(self) -> float:
        return float(self.values.sum())


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for a 64-bit seed, optionally mixed with item/stream indices."""
    if not 0 <= int(seed) < 2 ** 64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return np.random.default_rng([int(seed), *map(int, stream)])


# -- tensor files ---------------------------------------------------------

MAGIC = b"DPT1"


def write_tensor(path, values, dims=None) -> None:
    values = np.asarray(values)
    if dims is None:
        dims = values.shape
    dims = tuple(int(d) for d in dims)
    if len(dims) > 255:
        raise TensorFormatError("too many dimensions")
    if int(np.prod(dims, dtype=np.int64)) != values.size:
        raise PayloadMismatchError(f"dims {dims} do not match {values.size} values")
    if not np.all(np.isfinite(values)):
        raise ValueError("tensor values must be finite")
    header = MAGIC + struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> tuple[tuple[int, ...], np.ndarray]:
    """Return (dims, float32 array of shape dims)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 5:
        raise PayloadMismatchError(f"{path}: truncated header")
    ndim = data[4]
    head = 5 + 4 * ndim
    if len(data) < head:
        raise PayloadMismatchError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", data[5:head])
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(data) - head != expected:
        raise PayloadMismatchError(
            f"{path}: dims {dims} need {expected} payload bytes, found {len(data) - head}")
    values = np.frombuffer(data, dtype="<f4", offset=head).reshape(dims)
    return tuple(dims), values.astype(np.float32)
