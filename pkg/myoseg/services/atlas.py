"""Keypoint alignment and a probabilistic per-muscle atlas for label transfer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import ValidationError
from scipy import ndimage
from scipy.spatial import ConvexHull
from skimage.filters import threshold_otsu
from skimage.measure import label, regionprops

from ..exceptions import BoneNotFoundError, DataError, KeypointError, PipelineError
from ..schemas import AtlasMetadata, AtlasMuscleEntry, KeypointsModel
from .imgio import GrayImage, LabelMask
from .preproc import ImageLike, as_array
from .telemetry import get_logger

logger = get_logger(__name__)

BONE_AREA_MIN = 100
BONE_AREA_MAX = 3000
TRUNCATION = 0.5
ATLAS_METADATA_NAME = "atlas.json"

Point = Tuple[float, float]


# --- keypoints -------------------------------------------------------------


def bone_centroid(image: ImageLike, area_min: int = BONE_AREA_MIN, area_max: int = BONE_AREA_MAX) -> Point:
    """Centroid (x, y) of the most circular dark component of plausible bone size.

    The image is split at its Otsu threshold; components of the lower class
    are hole-filled, filtered by area and ranked by 4*pi*A/P^2.
    """
    data = as_array(image)
    if np.ptp(data) <= 0.0:
        raise BoneNotFoundError("bone not found: image has a single intensity")
    dark = data <= threshold_otsu(data)
    components = label(dark, connectivity=1)

    best: Optional[Tuple[float, Point]] = None
    for region in regionprops(components):
        if region.area > area_max:
            continue
        filled = np.pad(region.image_filled, 1)
        area = int(filled.sum())
        if not area_min <= area <= area_max:
            continue
        props = regionprops(filled.astype(np.uint8))[0]
        if props.perimeter <= 0:
            continue
        circularity = 4.0 * math.pi * area / (props.perimeter ** 2)
        if best is None or circularity > best[0]:
            min_row, min_col = region.bbox[:2]
            row, col = props.centroid
            best = (circularity, (float(min_col + col - 1), float(min_row + row - 1)))

    if best is None:
        raise BoneNotFoundError(f"bone not found: no dark component with area in [{area_min}, {area_max}]")
    return best[1]


@dataclass(frozen=True)
class Keypoints:
    bone_centroid: Point
    distal_point: Point
    hull: Tuple[Point, ...]

    @property
    def distal_vector(self) -> np.ndarray:
        return np.subtract(self.distal_point, self.bone_centroid)

    def to_model(self) -> KeypointsModel:
        return KeypointsModel(bone_centroid=self.bone_centroid, distal_point=self.distal_point, hull=list(self.hull))

    @classmethod
    def from_model(cls, model: KeypointsModel) -> "Keypoints":
        return cls(tuple(model.bone_centroid), tuple(model.distal_point), tuple(tuple(p) for p in model.hull))


def keypoints_from_mask(foreground: np.ndarray, centroid: Point) -> Keypoints:
    """Convex hull of the foreground pixel centers and its vertex farthest from ``centroid``.

    Equidistant vertices resolve to the smallest atan2 angle about the centroid.
    """
    rows, cols = np.nonzero(np.asarray(foreground))
    if rows.size == 0:
        raise KeypointError("empty foreground, no keypoints")
    points = np.column_stack([cols, rows]).astype(np.float64)
    if np.linalg.matrix_rank(points - points.mean(axis=0)) < 2:
        raise KeypointError("collinear foreground, hull is degenerate")

    hull = ConvexHull(points)
    vertices = points[hull.vertices]
    offsets = vertices - np.asarray(centroid, dtype=np.float64)
    distance = np.hypot(offsets[:, 0], offsets[:, 1])
    farthest = np.flatnonzero(np.isclose(distance, distance.max(), rtol=0.0, atol=1e-9))
    angles = np.arctan2(offsets[farthest, 1], offsets[farthest, 0])
    distal = vertices[farthest[np.argmin(angles)]]
    return Keypoints(
        bone_centroid=(float(centroid[0]), float(centroid[1])),
        distal_point=(float(distal[0]), float(distal[1])),
        hull=tuple((float(x), float(y)) for x, y in vertices),
    )


# --- alignment -------------------------------------------------------------


def _wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    theta = math.remainder(theta, 2.0 * math.pi)
    return math.pi if theta <= -math.pi else theta


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Alignment:
    """Similarity transform A(p) = pivot + scale * R(rotation) @ (p + translation - pivot).

    Translation is applied first, then rotation and scaling about the pivot.
    """

    translation: Point = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0
    pivot: Point = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"alignment scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", _wrap_angle(float(self.rotation)))

    @classmethod
    def identity(cls, pivot: Point = (0.0, 0.0)) -> "Alignment":
        return cls(pivot=pivot)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix acting on (x, y, 1) columns."""
        linear = self.scale * _rotation(self.rotation)
        pivot = np.asarray(self.pivot, dtype=np.float64)
        offset = pivot + linear @ (np.asarray(self.translation, dtype=np.float64) - pivot)
        out = np.eye(3)
        out[:2, :2] = linear
        out[:2, 2] = offset
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        points = np.asarray(points, dtype=np.float64)
        m = self.matrix()
        return points @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "Alignment":
        tx, ty = self.translation
        px, py = self.pivot
        return Alignment(
            translation=(-tx, -ty),
            rotation=-self.rotation,
            scale=1.0 / self.scale,
            pivot=(px - tx, py - ty),
        )

    def compose(self, other: "Alignment") -> np.ndarray:
        """Homogeneous matrix of self after other."""
        return self.matrix() @ other.matrix()


def compute_alignment(ref: Keypoints, tgt: Keypoints) -> Alignment:
    """Alignment taking the target keypoints onto the reference keypoints."""
    d1 = ref.distal_vector
    d2 = tgt.distal_vector
    n1, n2 = float(np.hypot(*d1)), float(np.hypot(*d2))
    if n2 <= 0.0:
        raise KeypointError("target distal vector has zero length")
    if n1 <= 0.0:
        raise KeypointError("reference distal vector has zero length")
    cross = d2[0] * d1[1] - d2[1] * d1[0]
    dot = d2[0] * d1[0] + d2[1] * d1[1]
    translation = (ref.bone_centroid[0] - tgt.bone_centroid[0], ref.bone_centroid[1] - tgt.bone_centroid[1])
    return Alignment(
        translation=translation,
        rotation=math.atan2(cross, dot),
        scale=n1 / n2,
        pivot=ref.bone_centroid,
    )


def _resample(labels: np.ndarray, sample: Alignment, out_dims: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor pull: output pixel p takes labels at sample(p); outside is 0."""
    m = sample.matrix()
    # affine_transform works in (row, col) = (y, x) order.
    linear = m[:2, :2][::-1, ::-1]
    offset = m[:2, 2][::-1]
    width, height = out_dims
    return ndimage.affine_transform(
        labels.astype(np.int32),
        linear,
        offset=offset,
        output_shape=(height, width),
        order=0,
        mode="constant",
        cval=0,
    )


def warp_mask(mask: LabelMask, alignment: Alignment, out_dims: Tuple[int, int]) -> LabelMask:
    """Carry a mask into the aligned frame; output pixel p samples the source at A^-1(p)."""
    return LabelMask(_resample(mask.labels, alignment.inverse(), out_dims), mask.palette)


def warp_back(mask: LabelMask, alignment: Alignment, out_dims: Tuple[int, int]) -> LabelMask:
    """Undo warp_mask; output pixel p samples the source at A(p)."""
    return LabelMask(_resample(mask.labels, alignment, out_dims), mask.palette)


# --- atlas -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MuscleAtlas:
    """Per-muscle contributor counts in the reference frame."""

    reference_dims: Tuple[int, int]
    reference_keypoints: Keypoints
    counts: Dict[int, np.ndarray]
    contributors: int
    palette: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.contributors < 1:
            raise DataError("atlas needs at least one contributor")
        width, height = self.reference_dims
        for muscle_id, counts in self.counts.items():
            if counts.shape != (height, width):
                raise DataError(f"muscle {muscle_id} counts have shape {counts.shape}, expected {(height, width)}")

    @property
    def muscle_ids(self) -> List[int]:
        return sorted(self.counts)

    def peak(self, muscle_id: int) -> int:
        return int(self.counts[muscle_id].max())

    def threshold(self, muscle_id: int) -> int:
        return max(1, math.ceil(TRUNCATION * self.peak(muscle_id)))

    def region(self, muscle_id: int) -> np.ndarray:
        """Truncated region: pixels whose count reaches half the muscle's peak."""
        return self.counts[muscle_id] >= self.threshold(muscle_id)

    def probability(self, muscle_id: int) -> np.ndarray:
        return self.counts[muscle_id] / float(self.contributors)

    @cached_property
    def label_map(self) -> np.ndarray:
        """Full-frame labels: the truncated region with the higher count wins, then the
        smaller id; pixels outside every region copy the nearest region pixel."""
        ids = self.muscle_ids
        if not ids:
            raise PipelineError("atlas holds no muscles")
        scores = np.stack([np.where(self.region(i), self.counts[i], -1) for i in ids])
        best = np.argmax(scores, axis=0)
        covered = scores.max(axis=0) >= 0
        labels = np.where(covered, np.asarray(ids)[best], 0).astype(np.int32)
        if not covered.all():
            _, (rows, cols) = ndimage.distance_transform_edt(~covered, return_indices=True)
            labels = labels[rows, cols]
        labels.setflags(write=False)
        return labels

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        muscles: Dict[int, AtlasMuscleEntry] = {}
        for muscle_id in self.muscle_ids:
            counts = self.counts[muscle_id]
            if counts.max(initial=0) > 65535:
                raise DataError(f"muscle {muscle_id} counts exceed 16 bits")
            name = f"muscle_{muscle_id:03d}.png"
            Image.fromarray(counts.astype(np.uint16)).save(directory / name)
            muscles[muscle_id] = AtlasMuscleEntry(peak=self.peak(muscle_id), file=name)
        metadata = AtlasMetadata(
            reference_dims=self.reference_dims,
            contributors=self.contributors,
            muscles=muscles,
            reference_keypoints=self.reference_keypoints.to_model(),
            palette=self.palette,
        )
        path = directory / ATLAS_METADATA_NAME
        path.write_text(metadata.model_dump_json(indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MuscleAtlas":
        """Load from an atlas directory or its metadata file."""
        path = Path(path)
        if path.is_dir():
            path = path / ATLAS_METADATA_NAME
        if not path.is_file():
            raise DataError(f"Atlas metadata not found: {path}")
        try:
            metadata = AtlasMetadata.model_validate_json(path.read_text())
        except ValidationError as e:
            raise DataError(f"Invalid atlas metadata {path}: {e}") from e

        counts: Dict[int, np.ndarray] = {}
        for muscle_id, entry in metadata.muscles.items():
            count_path = path.parent / entry.file
            if not count_path.is_file():
                raise DataError(f"Atlas count map not found: {count_path}")
            with Image.open(count_path) as img:
                counts[int(muscle_id)] = np.asarray(img).astype(np.int64)
            if int(counts[muscle_id].max(initial=0)) != entry.peak:
                raise DataError(f"{count_path} peak disagrees with metadata ({entry.peak})")
        return cls(
            reference_dims=tuple(metadata.reference_dims),
            reference_keypoints=Keypoints.from_model(metadata.reference_keypoints),
            counts=counts,
            contributors=metadata.contributors,
            palette=dict(metadata.palette),
        )


def slice_keypoints(
    mask: LabelMask, image: ImageLike, area_min: int = BONE_AREA_MIN, area_max: int = BONE_AREA_MAX
) -> Keypoints:
    """Bone centroid from the image, hull from the mask foreground."""
    return keypoints_from_mask(mask.foreground, bone_centroid(image, area_min, area_max))


def _merge_palettes(masks: Sequence[LabelMask]) -> Dict[int, str]:
    palette: Dict[int, str] = {}
    for mask in masks:
        for muscle_id, name in mask.palette.items():
            if palette.setdefault(muscle_id, name) != name:
                raise DataError(f"inconsistent palettes: label {muscle_id} is {palette[muscle_id]!r} and {name!r}")
    return palette


def build_atlas(
    masks: Sequence[LabelMask],
    images: Sequence[ImageLike],
    reference_index: int,
    area_min: int = BONE_AREA_MIN,
    area_max: int = BONE_AREA_MAX,
    provenance: Optional[Sequence[Tuple[str, int]]] = None,
) -> MuscleAtlas:
    """Align every mask onto the reference slice and count per-muscle coverage.

    Contributors whose keypoints cannot be found are skipped with a warning;
    a failing reference slice is an error.
    """
    if len(masks) < 2:
        raise DataError(f"atlas needs at least 2 masks, got {len(masks)}")
    if len(images) != len(masks):
        raise DataError(f"{len(masks)} masks but {len(images)} images")
    if not 0 <= reference_index < len(masks):
        raise DataError(f"reference index {reference_index} outside 0..{len(masks) - 1}")
    palette = _merge_palettes(masks)
    provenance = list(provenance) if provenance is not None else [("", i) for i in range(len(masks))]

    reference = masks[reference_index]
    ref_image = as_array(images[reference_index])
    if ref_image.shape != reference.labels.shape:
        raise DataError(f"reference image {ref_image.shape[::-1]} and mask {reference.dims} differ")
    ref_keypoints = slice_keypoints(reference, ref_image, area_min, area_max)
    dims = reference.dims

    counts: Dict[int, np.ndarray] = {}
    contributors = 0
    for index, (mask, image) in enumerate(zip(masks, images)):
        if index == reference_index:
            aligned = mask
        else:
            volume, slice_index = provenance[index]
            try:
                alignment = compute_alignment(ref_keypoints, slice_keypoints(mask, image, area_min, area_max))
            except PipelineError as e:
                logger.warning("atlas_contributor_skipped", volume=volume, slice=slice_index, error=str(e))
                continue
            aligned = warp_mask(mask, alignment, dims)
        contributors += 1
        for muscle_id in mask.label_ids:
            counts.setdefault(muscle_id, np.zeros(reference.labels.shape, dtype=np.int64))
            counts[muscle_id] += aligned.labels == muscle_id

    atlas = MuscleAtlas(
        reference_dims=dims,
        reference_keypoints=ref_keypoints,
        counts=counts,
        contributors=contributors,
        palette=palette,
    )
    logger.info(
        "atlas_built",
        contributors=contributors,
        skipped=len(masks) - contributors,
        muscles=len(counts),
        reference=reference_index,
    )
    return atlas


def transfer_labels(binary: LabelMask, atlas: MuscleAtlas, alignment: Alignment) -> LabelMask:
    """Give each foreground pixel the atlas label at its aligned position.

    Positions outside the atlas frame clamp to its edge, so the foreground
    support is preserved exactly.
    """
    rows, cols = np.nonzero(binary.foreground)
    out = np.zeros(binary.labels.shape, dtype=np.int32)
    if rows.size:
        label_map = atlas.label_map
        mapped = alignment.apply(np.column_stack([cols, rows]).astype(np.float64))
        height, width = label_map.shape
        x = np.clip(np.rint(mapped[:, 0]), 0, width - 1).astype(np.int64)
        y = np.clip(np.rint(mapped[:, 1]), 0, height - 1).astype(np.int64)
        out[rows, cols] = label_map[y, x]
    return LabelMask(out, atlas.palette)


def label_segmentation(
    binary: LabelMask,
    image: ImageLike,
    atlas: MuscleAtlas,
    area_min: int = BONE_AREA_MIN,
    area_max: int = BONE_AREA_MAX,
) -> LabelMask:
    """Assign muscle ids to a binary segmentation through the atlas.

    Raises:
        BoneNotFoundError: no bone in ``image``.
        KeypointError: the binary foreground has no usable hull.
    """
    data = image.data if isinstance(image, GrayImage) else np.asarray(image)
    if data.shape != binary.labels.shape:
        raise DataError(f"image {data.shape[::-1]} and binary mask {binary.dims} differ")
    keypoints = slice_keypoints(binary, data, area_min, area_max)
    return transfer_labels(binary, atlas, compute_alignment(atlas.reference_keypoints, keypoints))


__all__ = [
    "Alignment",
    "Keypoints",
    "MuscleAtlas",
    "bone_centroid",
    "keypoints_from_mask",
    "compute_alignment",
    "warp_mask",
    "warp_back",
    "build_atlas",
    "slice_keypoints",
    "transfer_labels",
    "label_segmentation",
]
