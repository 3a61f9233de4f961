"""Raster grids and the pixel-level arithmetic every pipeline stage shares.

A grid is a height x width x channels float array, row-major and
channel-last, so the per-pixel feature vectors used by the clustering
stage are contiguous in memory.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple

import numpy as np
from scipy.ndimage import convolve1d

from .errors import FormatError, ParameterError, ShapeError

PDM1_MAGIC = b"PDM1"


class PixelCoord(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class RasterGrid:
    """Immutable H x W x C raster of finite real values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"grid data must be 3-d (H, W, C), got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"grid must be non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("grid contains non-finite values")
        object.__setattr__(self, "data", np.ascontiguousarray(arr, dtype=np.float64))

    @classmethod
    def from_array(cls, arr) -> "RasterGrid":
        """Build a grid from a 2-d (single channel) or 3-d array."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def total(self) -> float:
        return float(self.data.sum())

    def plane(self, channel: int = 0) -> np.ndarray:
        """One channel as a 2-d array."""
        if not 0 <= channel < self.channels:
            raise ShapeError(f"channel {channel} out of range for {self.channels}-channel grid")
        return self.data[:, :, channel]


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian truncated at 4*sigma."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = int(4.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(grid: RasterGrid, sigma: float) -> RasterGrid:
    """Separable Gaussian blur of a single-channel grid with zero padding.

    Mass lost at the borders is not restored here; the density builders
    renormalize per instance instead.
    """
    if grid.channels != 1:
        raise ShapeError(f"gaussian_blur expects a single channel, got {grid.channels}")
    kernel = gaussian_kernel_1d(sigma)
    plane = grid.plane()
    blurred = convolve1d(plane, kernel, axis=0, mode="constant", cval=0.0)
    blurred = convolve1d(blurred, kernel, axis=1, mode="constant", cval=0.0)
    return RasterGrid.from_array(blurred)


def sum_pool(grid: RasterGrid, factor: int) -> RasterGrid:
    """Down-sample by summing factor x factor blocks; grid total is preserved."""
    if factor < 1 or int(factor) != factor:
        raise ParameterError(f"pool factor must be a positive integer, got {factor}")
    factor = int(factor)
    h, w, c = grid.data.shape
    if h % factor or w % factor:
        raise ShapeError(f"grid {h}x{w} is not divisible by pool factor {factor}")
    blocks = grid.data.reshape(h // factor, factor, w // factor, factor, c)
    return RasterGrid(blocks.sum(axis=(1, 3)))


def dihedral_transform(grid: RasterGrid, element: int) -> RasterGrid:
    """Apply one of the 8 square symmetries (4 rotations x optional flip)."""
    return RasterGrid(dihedral_transform_array(grid.data, element))


def dihedral_transform_array(arr: np.ndarray, element: int) -> np.ndarray:
    """Same symmetry applied to a bare array; rotation acts on the first two axes."""
    if element not in range(8):
        raise ParameterError(f"dihedral element must be in 0..7, got {element}")
    out = np.rot90(arr, k=element % 4, axes=(0, 1))
    if element >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(element: int) -> int:
    """Element that undoes `element`; flipped elements are their own inverse."""
    if element not in range(8):
        raise ParameterError(f"dihedral element must be in 0..7, got {element}")
    if element < 4:
        return (4 - element) % 4
    return element


def dihedral_transform_point(point, shape, element: int) -> PixelCoord:
    """Map a pixel coordinate the same way dihedral_transform moves that pixel.

    `shape` is the (height, width) of the grid the point lives in.
    """
    if element not in range(8):
        raise ParameterError(f"dihedral element must be in 0..7, got {element}")
    i, j = int(point[0]), int(point[1])
    h, w = int(shape[0]), int(shape[1])
    for _ in range(element % 4):
        i, j = w - 1 - j, i
        h, w = w, h
    if element >= 4:
        j = w - 1 - j
    return PixelCoord(i, j)


def dihedral_shape(shape, element: int):
    """(height, width) after applying `element` to a grid of the given shape."""
    h, w = int(shape[0]), int(shape[1])
    return (w, h) if element % 4 in (1, 3) else (h, w)


def write_pdm1(target, grid: RasterGrid) -> None:
    """Write a grid in the PDM1 raster format (path or binary file object)."""
    header = PDM1_MAGIC + struct.pack("<III", grid.height, grid.width, grid.channels)
    payload = grid.data.astype("<f4").tobytes()
    if hasattr(target, "write"):
        target.write(header + payload)
    else:
        with open(target, "wb") as fh:
            fh.write(header + payload)


def pdm1_bytes(grid: RasterGrid) -> bytes:
    header = PDM1_MAGIC + struct.pack("<III", grid.height, grid.width, grid.channels)
    return header + grid.data.astype("<f4").tobytes()


def read_pdm1(source) -> RasterGrid:
    """Read a PDM1 raster from a path, binary file object, or bytes."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif hasattr(source, "read"):
        raw = source.read()
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    if len(raw) < 16 or raw[:4] != PDM1_MAGIC:
        raise FormatError("not a PDM1 raster (bad magic or truncated header)")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * h * w * c
    if len(raw) != expected:
        raise FormatError(f"PDM1 payload has {len(raw) - 16} bytes, expected {expected - 16}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64)
    return RasterGrid(data.reshape(h, w, c))


def nearest_upsample(grid, factor: int):
    """Nearest-neighbour upsample by an integer factor along height and width.

    Accepts a RasterGrid (returns RasterGrid, channels kept) or a 2-d array
    (returns a 2-d array).
    """
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    arr = grid.data if isinstance(grid, RasterGrid) else np.asarray(grid)
    out = np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)
    return RasterGrid(out) if isinstance(grid, RasterGrid) else out
