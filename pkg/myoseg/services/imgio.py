"""Grayscale image, label mask and manifest I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import ValidationError

from ..exceptions import DataError
from ..schemas import DatasetManifest
from .telemetry import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

SUPPORTED_SUFFIXES = {".png", ".pgm"}
_BIT_DEPTH_MAX = {"L": 255.0, "I;16": 65535.0, "I;16B": 65535.0, "I;16L": 65535.0, "I": 65535.0}
_MASK_MODES = {"L", "P", "I;16", "I;16B", "I;16L", "I"}
OVERLAY_ALPHA = 0.5

# Qualitative palette, one entry per label id modulo its length.
_LABEL_COLORS = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
        (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
        (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    ],
    dtype=np.float64,
)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major intensities in [0, 1]; ``data`` has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("GrayImage intensities must be finite and inside [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.width, self.height)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-pixel muscle ids (0 = background) with an id -> name palette."""

    labels: np.ndarray
    palette: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError(f"LabelMask needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer) and arr.dtype != np.bool_:
            raise DataError(f"LabelMask needs integer labels, got {arr.dtype}")
        arr = arr.astype(np.int32)
        if arr.min() < 0:
            raise DataError("LabelMask ids must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "palette", {int(k): str(v) for k, v in self.palette.items()})

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.width, self.height)

    @property
    def label_ids(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.labels) if v > 0)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def is_contiguous(self) -> bool:
        """True when the ids present are exactly {0..K}."""
        present = set(int(v) for v in np.unique(self.labels))
        return present == set(range(max(present) + 1))

    def name_of(self, label_id: int) -> str:
        return self.palette.get(label_id, str(label_id))


def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise DataError(f"Image file not found: {path}")
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise DataError(f"Unsupported image format {path.suffix!r} for {path}; use PNG or PGM")
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as e:
        raise DataError(f"Could not decode {path}: {e}") from e
    if img.width == 0 or img.height == 0:
        raise DataError(f"Zero-sized image: {path}")
    return img


def load_image(path: PathLike) -> GrayImage:
    """Load an 8- or 16-bit single-channel raster, scaled by its bit-depth maximum."""
    path = Path(path)
    img = _open(path)
    scale = _BIT_DEPTH_MAX.get(img.mode)
    if scale is None:
        raise DataError(f"{path} has mode {img.mode!r}; only 8/16-bit single-channel images are supported")
    data = np.asarray(img, dtype=np.float64)
    if data.ndim != 2:
        raise DataError(f"{path} is not single-channel")
    if data.max(initial=0.0) > scale:
        raise DataError(f"{path} holds values above its {int(scale)} bit-depth maximum")
    return GrayImage(data / scale)


def _palette_sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def load_mask(path: PathLike, expected_dims: Optional[Tuple[int, int]] = None) -> LabelMask:
    """Load integer labels verbatim; the palette comes from a ``.json`` sidecar if present.

    Args:
        path: PNG/PGM label image.
        expected_dims: (width, height) declared by the paired image, if known.
    """
    path = Path(path)
    img = _open(path)
    if img.mode not in _MASK_MODES:
        raise DataError(f"{path} has mode {img.mode!r}; masks must be single-channel integer images")
    labels = np.asarray(img)
    if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"{path} does not hold integer label data")
    if expected_dims is not None and (labels.shape[1], labels.shape[0]) != tuple(expected_dims):
        raise DataError(
            f"{path} is {labels.shape[1]}x{labels.shape[0]}, expected {expected_dims[0]}x{expected_dims[1]}"
        )

    palette: Dict[int, str] = {}
    sidecar = _palette_sidecar(path)
    if sidecar.is_file():
        try:
            raw = json.loads(sidecar.read_text())
            palette = {int(k): str(v) for k, v in raw.items()}
        except (json.JSONDecodeError, AttributeError, ValueError) as e:
            raise DataError(f"Malformed palette sidecar {sidecar}: {e}") from e
    mask = LabelMask(labels.astype(np.int32), palette)
    if not palette:
        mask = LabelMask(mask.labels, {k: str(k) for k in mask.label_ids})
    return mask


def _writable(path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create directory for {path}: {e}") from e
    return path


def save_image(image: GrayImage, path: PathLike, bits: int = 16) -> None:
    """Quantize to 8 or 16 bits and write a PNG/PGM."""
    path = _writable(Path(path))
    if bits == 8:
        raster = np.rint(image.data * 255.0).astype(np.uint8)
    elif bits == 16:
        raster = np.rint(image.data * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    try:
        Image.fromarray(raster).save(path)
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def save_mask(mask: LabelMask, path: PathLike) -> None:
    """Write labels as an 8-bit PNG plus a palette sidecar; lossless with load_mask."""
    path = _writable(Path(path))
    if mask.labels.max(initial=0) > 255:
        raise DataError(f"Mask holds label {mask.labels.max()} which does not fit 8 bits")
    try:
        Image.fromarray(mask.labels.astype(np.uint8)).save(path)
        if mask.palette:
            _palette_sidecar(path).write_text(
                json.dumps({str(k): v for k, v in sorted(mask.palette.items())}, indent=2) + "\n"
            )
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def label_color(label_id: int) -> np.ndarray:
    return _LABEL_COLORS[(label_id - 1) % len(_LABEL_COLORS)]


def overlay_rgb(image: GrayImage, mask: LabelMask, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend per-label colors over the grayscale; background pixels keep their gray."""
    if image.data.shape != mask.labels.shape:
        raise DataError(f"Overlay size mismatch: image {image.dims} vs mask {mask.dims}")
    gray = np.rint(image.data * 255.0)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for label_id in mask.label_ids:
        sel = mask.labels == label_id
        rgb[sel] = (1.0 - alpha) * rgb[sel] + alpha * label_color(label_id)
    return np.rint(rgb).astype(np.uint8)


def save_overlay(image: GrayImage, mask: LabelMask, path: PathLike) -> None:
    path = _writable(Path(path))
    try:
        Image.fromarray(overlay_rgb(image, mask)).save(path)
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def load_manifest(path: PathLike) -> DatasetManifest:
    """Parse a manifest; its relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Manifest not found: {path}")
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text())
    except ValidationError as e:
        raise DataError(f"Invalid manifest {path}: {e}") from e
    manifest.root = path.parent
    logger.debug("manifest_loaded", path=str(path), volumes=len(manifest.volumes))
    return manifest


def save_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    path = _writable(Path(path))
    path.write_text(manifest.model_dump_json(indent=2) + "\n")


def check_manifest_paths(manifest: DatasetManifest, require_masks: bool = False) -> None:
    """Fail early when a referenced file is missing."""
    for ref in manifest.iter_slices():
        if not ref.image.is_file():
            raise DataError(f"volume {ref.volume} slice {ref.index}: image {ref.image} not found")
        if ref.mask is None:
            if require_masks:
                raise DataError(f"volume {ref.volume} slice {ref.index}: no ground-truth mask")
        elif not ref.mask.is_file():
            raise DataError(f"volume {ref.volume} slice {ref.index}: mask {ref.mask} not found")
