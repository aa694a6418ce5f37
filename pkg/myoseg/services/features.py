"""Per-block texture descriptor: HOG, intensity moments and Haar wavelet energies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import pywt
from scipy import stats

from .preproc import (
    BLOCK_SIZE,
    LOG_SIGMA,
    LOG_SIZE,
    BlockGrid,
    ImageLike,
    as_array,
    grid_of,
    log_filter,
    log_kernel,
    tiles,
)

HOG_ORIENTATIONS = 9
HOG_CLIP = 0.2
HOG_EPSILON = 1e-4
DWT_LEVELS = 3
DEGENERATE_VARIANCE = 1e-12
DESCRIPTOR_LENGTH = 4 * HOG_ORIENTATIONS + 8 + 1 + 3 * DWT_LEVELS


def descriptor_length(orientations: int = HOG_ORIENTATIONS, levels: int = DWT_LEVELS) -> int:
    return 4 * orientations + 8 + 1 + 3 * levels


def feature_names(n_features: int = DESCRIPTOR_LENGTH) -> List[str]:
    return [f"f{i:02d}" for i in range(n_features)]


@dataclass(frozen=True, eq=False)
class BlockDescriptor:
    """Named view over one block's descriptor vector."""

    hog: np.ndarray
    moments_raw: np.ndarray
    moments_log: np.ndarray
    wavelet: np.ndarray

    @classmethod
    def from_vector(cls, vector: np.ndarray, orientations: int = HOG_ORIENTATIONS) -> "BlockDescriptor":
        n_hog = 4 * orientations
        vector = np.asarray(vector, dtype=np.float64)
        return cls(
            hog=vector[:n_hog],
            moments_raw=vector[n_hog:n_hog + 4],
            moments_log=vector[n_hog + 4:n_hog + 8],
            wavelet=vector[n_hog + 8:],
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.hog, self.moments_raw, self.moments_log, self.wavelet])

    def __len__(self) -> int:
        return len(self.hog) + 8 + len(self.wavelet)


@dataclass(frozen=True, eq=False)
class WaveletPyramid:
    """``details[l - 1]`` holds the (H, V, D) subbands of level l; ``approx`` is the last LL."""

    approx: np.ndarray
    details: Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]

    @property
    def levels(self) -> int:
        return len(self.details)


# --- HOG -------------------------------------------------------------------


def _gradients(data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    padded = np.pad(data, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return gx, gy


def cell_histograms(image: ImageLike, block_size: int = BLOCK_SIZE, orientations: int = HOG_ORIENTATIONS) -> np.ndarray:
    """Unnormalized per-cell orientation histograms, shape (rows, cols, orientations)."""
    data = as_array(image)
    grid = grid_of(data, block_size)
    gx, gy = _gradients(data)
    h, w = grid.covered_shape
    gx, gy = gx[:h, :w], gy[:h, :w]

    magnitude = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    position = theta / (np.pi / orientations)
    lower = np.floor(position)
    upper_weight = position - lower
    lower = lower.astype(np.int64) % orientations
    upper = (lower + 1) % orientations

    rr, cc = np.divmod(np.arange(h * w), w)
    cell = (rr // block_size) * grid.cols + (cc // block_size)
    cell = cell.reshape(h, w)
    n_bins = grid.count * orientations
    hist = np.bincount((cell * orientations + lower).ravel(), (magnitude * (1.0 - upper_weight)).ravel(), n_bins)
    hist += np.bincount((cell * orientations + upper).ravel(), (magnitude * upper_weight).ravel(), n_bins)
    return hist.reshape(grid.rows, grid.cols, orientations)


def hog_grid(
    image: ImageLike,
    block_size: int = BLOCK_SIZE,
    orientations: int = HOG_ORIENTATIONS,
    clip: float = HOG_CLIP,
    epsilon: float = HOG_EPSILON,
) -> np.ndarray:
    """Dalal-Triggs cell features, shape (rows, cols, 4 * orientations).

    Each cell histogram is L2-normalized against the four 2x2-cell
    neighborhoods containing it (up-left, up-right, down-left, down-right)
    and clipped. Neighborhoods past the image border reuse the edge cells.
    """
    hist = cell_histograms(image, block_size, orientations)
    energy = np.pad(np.sum(hist * hist, axis=2), 1, mode="edge")
    blocks = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    rows, cols = hist.shape[:2]
    neighborhoods = np.stack(
        [
            blocks[:rows, :cols],
            blocks[:rows, 1:cols + 1],
            blocks[1:rows + 1, :cols],
            blocks[1:rows + 1, 1:cols + 1],
        ],
        axis=2,
    )
    normalized = hist[:, :, None, :] / np.sqrt(neighborhoods + epsilon)[..., None]
    return np.minimum(normalized, clip).reshape(rows, cols, 4 * orientations)


# --- moments ---------------------------------------------------------------


def _moments(samples: np.ndarray) -> np.ndarray:
    """Population mean, variance, skewness, kurtosis along the last axis."""
    mean = samples.mean(axis=-1)
    m2 = stats.moment(samples, 2, axis=-1)
    m3 = stats.moment(samples, 3, axis=-1)
    m4 = stats.moment(samples, 4, axis=-1)
    flat = m2 <= DEGENERATE_VARIANCE
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe ** 1.5)
    kurt = np.where(flat, 0.0, m4 / (safe * safe))
    return np.stack([mean, m2, skew, kurt], axis=-1)


def block_moments(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile, dtype=np.float64)
    if not np.all(np.isfinite(tile)):
        raise ValueError("block_moments needs finite values")
    return _moments(tile.ravel())


def moments_grid(data: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """block_moments for every block, shape (rows, cols, 4)."""
    blocks = tiles(data, grid).reshape(grid.rows, grid.cols, -1)
    if not np.all(np.isfinite(blocks)):
        raise ValueError("block_moments needs finite values")
    return _moments(blocks)


# --- wavelets --------------------------------------------------------------


def haar_dwt(image: ImageLike, levels: int = DWT_LEVELS) -> WaveletPyramid:
    """Orthonormal separable Haar analysis of the running LL band."""
    data = as_array(image)
    step = 2 ** levels
    if data.shape[0] % step or data.shape[1] % step:
        raise ValueError(f"image {data.shape[1]}x{data.shape[0]} not divisible by {step} for {levels} levels")
    coeffs = pywt.wavedec2(data, "haar", mode="periodization", level=levels)
    details = tuple(tuple(band) for band in reversed(coeffs[1:]))
    return WaveletPyramid(approx=coeffs[0], details=details)


def haar_idwt(pyramid: WaveletPyramid) -> np.ndarray:
    coeffs = [pyramid.approx] + [tuple(band) for band in reversed(pyramid.details)]
    return pywt.waverec2(coeffs, "haar", mode="periodization")


def _subbands(pyramid: WaveletPyramid) -> List[Tuple[np.ndarray, int]]:
    """Subbands in descriptor order [LL_L, H1, V1, D1, ..., H_L, V_L, D_L] with their level."""
    bands = [(pyramid.approx, pyramid.levels)]
    for level, triple in enumerate(pyramid.details, start=1):
        bands.extend((band, level) for band in triple)
    return bands


def wavelet_block_features(pyramid: WaveletPyramid, block: Tuple[int, int], block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Mean absolute coefficient of each subband over the block's footprint."""
    r, c = block
    out = []
    for band, level in _subbands(pyramid):
        f = block_size >> level
        if f < 1 or r < 0 or c < 0 or (r + 1) * f > band.shape[0] or (c + 1) * f > band.shape[1]:
            raise IndexError(f"block ({r}, {c}) footprint lies outside level-{level} subband {band.shape}")
        out.append(np.abs(band[r * f:(r + 1) * f, c * f:(c + 1) * f]).mean())
    return np.array(out)


def wavelet_grid(pyramid: WaveletPyramid, grid: BlockGrid) -> np.ndarray:
    """wavelet_block_features for every block, shape (rows, cols, 1 + 3 * levels)."""
    out = []
    for band, level in _subbands(pyramid):
        f = grid.block_size >> level
        if f < 1:
            raise ValueError(f"block size {grid.block_size} too small for level {level}")
        sub = np.abs(band[:grid.rows * f, :grid.cols * f])
        out.append(sub.reshape(grid.rows, f, grid.cols, f).mean(axis=(1, 3)))
    return np.stack(out, axis=2)


# --- assembly --------------------------------------------------------------


def assemble_descriptor(
    image: ImageLike,
    block_size: int = BLOCK_SIZE,
    orientations: int = HOG_ORIENTATIONS,
    clip: float = HOG_CLIP,
    epsilon: float = HOG_EPSILON,
    log_size: int = LOG_SIZE,
    log_sigma: float = LOG_SIGMA,
    levels: int = DWT_LEVELS,
) -> np.ndarray:
    """Descriptor array of shape (rows, cols, 4*orientations + 8 + 1 + 3*levels).

    Layout per block: HOG bins, raw-tile moments, LoG-tile moments, wavelet
    energies. Pixels beyond the last full block are ignored.
    """
    if block_size % (2 ** levels):
        raise ValueError(f"block size {block_size} must be divisible by {2 ** levels}")
    data = as_array(image)
    grid = grid_of(data, block_size)
    h, w = grid.covered_shape

    hog = hog_grid(data, block_size, orientations, clip, epsilon)
    raw = moments_grid(data, grid)
    response = log_filter(data, log_kernel(log_size, log_sigma))
    filtered = moments_grid(response, grid)
    wavelet = wavelet_grid(haar_dwt(data[:h, :w], levels), grid)
    return np.concatenate([hog, raw, filtered, wavelet], axis=2)
