"""Laplacian-of-Gaussian filtering and block gridding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import ndimage

from ..exceptions import DataError
from .imgio import GrayImage

BLOCK_SIZE = 16
LOG_SIZE = 5
LOG_SIGMA = 1.5

ImageLike = Union[GrayImage, np.ndarray]


def as_array(image: ImageLike) -> np.ndarray:
    data = image.data if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {data.shape}")
    return data


@dataclass(frozen=True, eq=False)
class LogKernel:
    size: int
    sigma: float
    taps: np.ndarray


def log_kernel(size: int = LOG_SIZE, sigma: float = LOG_SIGMA) -> LogKernel:
    """Sample the analytic LoG on an integer lattice and force a zero tap sum."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"LoG size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError(f"LoG sigma must be positive, got {sigma}")
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    r2 = (x * x + y * y) / (2.0 * sigma * sigma)
    taps = -1.0 / (np.pi * sigma ** 4) * (1.0 - r2) * np.exp(-r2)
    taps = taps - taps.mean()
    taps.setflags(write=False)
    return LogKernel(size=size, sigma=float(sigma), taps=taps)


def log_filter(image: ImageLike, kernel: LogKernel) -> np.ndarray:
    """2-D correlation with edge-clamped borders; the response is left unscaled."""
    data = as_array(image)
    if data.shape[0] < kernel.size or data.shape[1] < kernel.size:
        raise ValueError(f"image {data.shape} is smaller than the {kernel.size}x{kernel.size} kernel")
    return ndimage.correlate(data, kernel.taps, mode="nearest")


@dataclass(frozen=True)
class BlockGrid:
    rows: int
    cols: int
    block_size: int = BLOCK_SIZE

    @property
    def covered_shape(self) -> tuple:
        """(height, width) of the pixels the grid covers."""
        return (self.rows * self.block_size, self.cols * self.block_size)

    @property
    def count(self) -> int:
        return self.rows * self.cols


def grid_of(image: ImageLike, block_size: int = BLOCK_SIZE) -> BlockGrid:
    """Non-overlapping blocks anchored at (0, 0); trailing pixels are dropped."""
    height, width = as_array(image).shape
    if height < block_size or width < block_size:
        raise DataError(f"image {width}x{height} is smaller than one {block_size}px block")
    return BlockGrid(rows=height // block_size, cols=width // block_size, block_size=block_size)


def block_view(image: ImageLike, grid: BlockGrid, r: int, c: int) -> np.ndarray:
    if not (0 <= r < grid.rows and 0 <= c < grid.cols):
        raise IndexError(f"block ({r}, {c}) outside a {grid.rows}x{grid.cols} grid")
    bs = grid.block_size
    return as_array(image)[bs * r:bs * (r + 1), bs * c:bs * (c + 1)]


def tiles(image: ImageLike, grid: BlockGrid) -> np.ndarray:
    """All blocks at once, shaped (rows, cols, block_size, block_size)."""
    bs = grid.block_size
    h, w = grid.covered_shape
    data = as_array(image)[:h, :w]
    return data.reshape(grid.rows, bs, grid.cols, bs).swapaxes(1, 2)
