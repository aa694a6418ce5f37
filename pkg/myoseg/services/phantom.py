"""Deterministic synthetic thigh slices with per-muscle ground truth.

Every random draw comes from a PCG64 stream keyed by (seed, slice, tissue),
so a slice is reproducible on its own and across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from ..exceptions import DataError
from ..schemas import DatasetManifest, PhantomSpec, SliceEntry, VolumeEntry
from .imgio import GrayImage, LabelMask, save_image, save_manifest, save_mask
from .telemetry import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"

# Stream ids inside one (seed, slice) family.
_BONE, _MUSCLE, _FAT, _STRIATION = range(4)
_GEOMETRY = 1000
_VOLUME = 1001

# Per-volume geometry perturbation at volume_variability = 1.
_VOLUME_SHIFT = 6.0
_VOLUME_AXES = 6.0
_VOLUME_ROTATION = 0.15
_VOLUME_LEVEL = 0.25


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


@dataclass(frozen=True)
class SliceGeometry:
    body_center: Tuple[float, float]
    body_axes: Tuple[float, float]
    rotation: float
    bone_center: Tuple[float, float]
    compartment_angle: float


def _slice_geometry(spec: PhantomSpec, index: int) -> SliceGeometry:
    """Smooth, bounded per-slice drift; consecutive slices move by at most slice_jitter px."""
    rng = _rng(spec.seed, _GEOMETRY)
    amplitude = rng.uniform(0.5, 1.0, size=5)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=5)
    # |sin(0.5 (i + 1) + p) - sin(0.5 i + p)| <= 0.5
    drift = spec.slice_jitter * amplitude * np.sin(0.5 * index + phase)

    rotation = spec.body_rotation
    cx, cy = spec.body_center
    # Bone position is defined in the unrotated body frame.
    bx, by = spec.bone_center[0] - cx, spec.bone_center[1] - cy
    c, s = math.cos(rotation), math.sin(rotation)
    bone = (cx + c * bx - s * by + drift[2], cy + s * bx + c * by + drift[3])
    reach = max(1.0, min(spec.body_axes) - spec.fat_thickness)
    return SliceGeometry(
        body_center=(cx, cy),
        body_axes=(spec.body_axes[0] + drift[0], spec.body_axes[1] + drift[1]),
        rotation=rotation,
        bone_center=bone,
        compartment_angle=spec.compartment_rotation + rotation + drift[4] / reach,
    )


def _check_geometry(spec: PhantomSpec) -> None:
    """Raise DataError when the anatomy cannot be drawn as configured."""
    a, b = spec.body_axes
    margin = spec.slice_jitter
    if spec.fat_thickness + margin >= min(a, b):
        raise DataError("fat layer is thicker than the body")
    ia, ib = a - spec.fat_thickness - margin, b - spec.fat_thickness - margin

    t = np.linspace(0.0, 2.0 * math.pi, 360, endpoint=False)
    c, s = math.cos(spec.body_rotation), math.sin(spec.body_rotation)
    cx, cy = spec.body_center
    rim = np.column_stack([cx + c * (a + margin) * np.cos(t) - s * (b + margin) * np.sin(t),
                           cy + s * (a + margin) * np.cos(t) + c * (b + margin) * np.sin(t)])
    if rim[:, 0].min() < 0 or rim[:, 1].min() < 0 or rim[:, 0].max() > spec.width - 1 or rim[:, 1].max() > spec.height - 1:
        raise DataError(f"body ellipse does not fit a {spec.width}x{spec.height} slice")

    # Bone plus its septum ring must sit inside the muscle ellipse (body frame).
    bx, by = spec.bone_center[0] - cx, spec.bone_center[1] - cy
    outer = spec.bone_radius + spec.septum_width + margin
    ring = np.column_stack([bx + outer * np.cos(t), by + outer * np.sin(t)])
    if np.any((ring[:, 0] / ia) ** 2 + (ring[:, 1] / ib) ** 2 >= 1.0):
        raise DataError("bone does not fit inside the muscle layer")

    arc = 2.0 * math.pi * (spec.bone_radius + spec.septum_width) / spec.muscles
    if arc <= 2.0 * spec.septum_width:
        raise DataError(f"{spec.muscles} compartments cannot fit around the bone")


@dataclass(frozen=True)
class TissueMaps:
    """Boolean tissue layout of one slice plus each pixel's compartment index."""

    muscle: np.ndarray
    septa: np.ndarray
    fat: np.ndarray
    bone: np.ndarray
    marrow: np.ndarray
    compartment: np.ndarray


def tissue_maps(spec: PhantomSpec, index: int) -> TissueMaps:
    geo = _slice_geometry(spec, index)
    y, x = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)

    cx, cy = geo.body_center
    c, s = math.cos(geo.rotation), math.sin(geo.rotation)
    u = c * (x - cx) + s * (y - cy)
    v = -s * (x - cx) + c * (y - cy)
    a, b = geo.body_axes
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    inner = (u / (a - spec.fat_thickness)) ** 2 + (v / (b - spec.fat_thickness)) ** 2 <= 1.0

    bx, by = geo.bone_center
    radius = np.hypot(x - bx, y - by)
    bone = radius <= spec.bone_radius
    bone_septum = (radius > spec.bone_radius) & (radius <= spec.bone_radius + spec.septum_width)

    sector = 2.0 * math.pi / spec.muscles
    angle = np.mod(np.arctan2(y - by, x - bx) - geo.compartment_angle, 2.0 * math.pi)
    compartment = np.minimum((angle // sector).astype(np.int64), spec.muscles - 1)
    to_edge = np.minimum(angle - compartment * sector, (compartment + 1) * sector - angle)
    ray_septum = radius * np.sin(np.minimum(to_edge, math.pi / 2)) < spec.septum_width / 2.0

    return TissueMaps(
        muscle=inner & ~bone & ~bone_septum & ~ray_septum,
        septa=inner & ~bone & (bone_septum | ray_septum),
        fat=body & ~inner,
        bone=bone,
        marrow=radius <= spec.marrow_radius,
        compartment=compartment,
    )


def _render(spec: PhantomSpec, index: int) -> Tuple[GrayImage, LabelMask]:
    tissue = tissue_maps(spec, index)
    muscle, septa, fat, compartment = tissue.muscle, tissue.septa, tissue.fat, tissue.compartment
    h, w = spec.height, spec.width
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.zeros((h, w))

    fat_noise = _rng(spec.seed, index, _FAT).normal(0.0, spec.fat_noise, size=(h, w))
    image[fat] = spec.mean("fat") + fat_noise[fat]
    image[septa] = spec.septa_intensity + fat_noise[septa]
    bone_noise = _rng(spec.seed, index, _BONE).normal(0.0, spec.bone_noise, size=(h, w))
    image[tissue.bone] = spec.mean("bone") + bone_noise[tissue.bone]
    image[tissue.marrow] = spec.mean("fat") + fat_noise[tissue.marrow]

    muscle_noise = _rng(spec.seed, index, _MUSCLE).normal(0.0, spec.muscle_noise, size=(h, w))
    striation_phase = _rng(spec.seed, index, _STRIATION).uniform(0.0, 2.0 * math.pi, size=spec.muscles)
    orientation = spec.striation_orientation + np.arange(spec.muscles) * math.pi / spec.muscles
    direction = x * np.cos(orientation)[compartment] + y * np.sin(orientation)[compartment]
    striation = spec.striation_amplitude * np.sin(
        2.0 * math.pi * spec.striation_frequency * direction + striation_phase[compartment]
    )
    image[muscle] = spec.mean("muscle") + muscle_noise[muscle] + striation[muscle]

    labels = np.where(muscle, compartment + 1, 0).astype(np.int32)
    palette = {k: f"muscle_{k:02d}" for k in range(1, spec.muscles + 1)}
    return GrayImage(np.clip(image, 0.0, 1.0)), LabelMask(labels, palette)


def generate_volume(spec: PhantomSpec) -> List[Tuple[GrayImage, LabelMask]]:
    """``spec.slices`` (image, mask) pairs, byte-deterministic per (seed, slice index)."""
    _check_geometry(spec)
    return [_render(spec, index) for index in range(spec.slices)]


def volume_spec(template: PhantomSpec, seed: int, slices: int) -> PhantomSpec:
    """Template with seed-dependent anatomy scaled by ``volume_variability``."""
    var = template.volume_variability
    rng = _rng(seed, _VOLUME)
    shift = rng.uniform(-1.0, 1.0, size=2) * _VOLUME_SHIFT * var
    axes = rng.uniform(-1.0, 1.0, size=2) * _VOLUME_AXES * var
    rotation = rng.uniform(-1.0, 1.0) * _VOLUME_ROTATION * var
    level = 0.5 + rng.uniform(-1.0, 1.0) * _VOLUME_LEVEL * min(var, 1.0)
    update = {
        "seed": seed,
        "slices": slices,
        "bone_center": (template.bone_center[0] + shift[0], template.bone_center[1] + shift[1]),
        "body_axes": (template.body_axes[0] + axes[0], template.body_axes[1] + axes[1]),
        "body_rotation": template.body_rotation + rotation,
    }
    if var > 0:
        update.update({"muscle_level": level, "fat_level": level})
    return PhantomSpec.model_validate({**template.model_dump(), **update})


def _write_volume(spec: PhantomSpec, volume_id: str, out_dir: Path) -> VolumeEntry:
    entries = []
    for index, (image, mask) in enumerate(generate_volume(spec)):
        image_name = f"{volume_id}/{index:03d}_image.png"
        mask_name = f"{volume_id}/{index:03d}_mask.png"
        save_image(image, out_dir / image_name, bits=16)
        save_mask(mask, out_dir / mask_name)
        entries.append(SliceEntry(index=index, image=image_name, mask=mask_name))
    (out_dir / volume_id / "phantom.json").write_text(spec.model_dump_json(indent=2) + "\n")
    return VolumeEntry(id=volume_id, slices=entries)


def generate_dataset(
    base_seed: int,
    volumes: int,
    slices_per_volume: int,
    out_dir: Union[str, Path],
    template: Optional[PhantomSpec] = None,
    n_jobs: int = 1,
) -> DatasetManifest:
    """Write ``volumes`` phantom volumes and their manifest under ``out_dir``.

    Volume v uses seed ``base_seed ^ v``.
    """
    if volumes < 1 or slices_per_volume < 1:
        raise ValueError(f"volume and slice counts must be >= 1, got {volumes} and {slices_per_volume}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    template = template or PhantomSpec()

    specs = [volume_spec(template, base_seed ^ v, slices_per_volume) for v in range(volumes)]
    for spec in specs:
        _check_geometry(spec)
    entries = Parallel(n_jobs=n_jobs)(
        delayed(_write_volume)(spec, f"vol{v:02d}", out_dir) for v, spec in enumerate(specs)
    )
    manifest = DatasetManifest(volumes=list(entries), root=out_dir)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(
        "dataset_generated",
        out_dir=str(out_dir),
        volumes=volumes,
        slices_per_volume=slices_per_volume,
        base_seed=base_seed,
    )
    return manifest


__all__ = [
    "generate_volume",
    "generate_dataset",
    "volume_spec",
    "tissue_maps",
    "TissueMaps",
    "SliceGeometry",
    "MANIFEST_NAME",
]
