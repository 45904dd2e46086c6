"""Density-map targets from head points, the /4../32 target pyramid, and the
binary ``DMAP`` file format.

Pixel (row r, col c) covers [c, c+1) x [r, r+1); a head at (x, y) deposits a
Gaussian evaluated at pixel centres (c + 0.5 - x, r + 0.5 - y), truncated to a
square window and renormalised over the part of the window that lies inside
the image, so every head contributes exactly one person.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError

DMAP_MAGIC = b"DMAP"
PYRAMID_DIVISORS = {3: 4, 4: 8, 5: 16, 6: 32}


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = 4.0
    truncation_radius: float | None = None  # defaults to 4 sigma

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.truncation_radius is None:
            object.__setattr__(self, "truncation_radius", 4.0 * self.sigma)
        if self.truncation_radius < 3 * self.sigma:
            raise ValueError("truncation_radius must be at least 3 sigma")


@dataclass
class DensityMap:
    values: np.ndarray
    scale_divisor: int = 1

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def count(self) -> float:
        return count(self)


class HeadOutOfBounds(ValueError):
    def __init__(self, index, x, y, width, height):
        self.index = index
        super().__init__(f"head {index} at ({x}, {y}) outside image {width}x{height}")


def _axis_weights(center: float, sigma: float, radius: float, extent: int):
    """1-D Gaussian weights and the pixel indices they land on (in-image only)."""
    base = math.floor(center)
    frac = center - base
    k = int(math.ceil(radius)) + 1
    offs = np.arange(-k, k + 1, dtype=np.float64)
    d = offs + 0.5 - frac
    keep = np.abs(d) <= radius
    d, idx = d[keep], (base + offs[keep]).astype(np.int64)
    wts = np.exp(-0.5 * (d / sigma) ** 2)
    inside = (idx >= 0) & (idx < extent)
    return idx[inside], wts[inside]


def rasterize(heads, image_size, spec: GaussianSpec = GaussianSpec()) -> DensityMap:
    """Full-resolution density map for ``heads`` = iterable of (x, y).

    ``image_size`` is (W, H).
    """
    width, height = (int(v) for v in image_size)
    if width < 1 or height < 1:
        raise ShapeError(f"image size must be positive, got {width}x{height}")
    out = np.zeros((height, width), dtype=np.float64)
    for n, (x, y) in enumerate(heads):
        x, y = float(x), float(y)
        if not (0 <= x < width and 0 <= y < height):
            raise HeadOutOfBounds(n, x, y, width, height)
        cols, wx = _axis_weights(x, spec.sigma, spec.truncation_radius, width)
        rows, wy = _axis_weights(y, spec.sigma, spec.truncation_radius, height)
        kernel = np.outer(wy, wx)
        kernel /= kernel.sum()
        out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] += kernel
    return DensityMap(out, 1)


def sum_pool(dmap: DensityMap, factor: int) -> DensityMap:
    v = dmap.values
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    h, w = v.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} map not divisible by {factor}")
    if factor == 1:
        return DensityMap(v.copy(), dmap.scale_divisor)
    pooled = v.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(pooled, dmap.scale_divisor * factor)


def count(dmap) -> float:
    v = dmap.values if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(np.sum(v, dtype=np.float64))


def target_pyramid(full: DensityMap) -> dict[int, DensityMap]:
    """Targets for scales 3..6 (/4, /8, /16, /32) by sum-pooling the full map."""
    if full.scale_divisor != 1:
        raise ShapeError("target_pyramid expects a full-resolution map")
    h, w = full.values.shape
    if h % 32 or w % 32:
        raise ShapeError(f"full map {h}x{w} must have extents divisible by 32")
    return {i: sum_pool(full, d) for i, d in PYRAMID_DIVISORS.items()}


def write_dmap(dmap: DensityMap, path) -> None:
    header = DMAP_MAGIC + struct.pack("<III", dmap.height, dmap.width, dmap.scale_divisor)
    body = np.ascontiguousarray(dmap.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_dmap(path) -> DensityMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DMAP_MAGIC:
        raise ValueError(f"{path}: not a DMAP file")
    h, w, div = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    return DensityMap(values, div)


def write_pgm(dmap: DensityMap, path) -> None:
    """8-bit grayscale preview, normalised by the map maximum."""
    v = np.asarray(dmap.values, dtype=np.float64)
    peak = v.max() if v.size else 0.0
    img = np.zeros(v.shape, dtype=np.uint8) if peak <= 0 else np.round(np.clip(v / peak, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode() + img.tobytes())
