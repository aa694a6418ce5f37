"""File formats exchanged between pipeline stages."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class SliceEntry(BaseModel):
    index: int = Field(..., ge=0, description="Slice position inside its volume")
    image: str = Field(..., description="Grayscale image path, relative to the manifest")
    mask: Optional[str] = Field(None, description="Label mask path, relative to the manifest")


class VolumeEntry(BaseModel):
    id: str = Field(..., min_length=1)
    slices: List[SliceEntry]

    @field_validator("slices")
    @classmethod
    def increasing_indices(cls, v: List[SliceEntry]) -> List[SliceEntry]:
        indices = [s.index for s in v]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"slice indices must be strictly increasing, got {indices}")
        return v


class SliceRef(BaseModel):
    """A manifest slice with its paths resolved."""

    model_config = ConfigDict(frozen=True)

    volume: str
    index: int
    image: Path
    mask: Optional[Path] = None

    @property
    def key(self) -> Tuple[str, int]:
        return (self.volume, self.index)


class DatasetManifest(BaseModel):
    volumes: List[VolumeEntry]
    root: Optional[Path] = Field(None, exclude=True, description="Directory paths resolve against")

    @field_validator("volumes")
    @classmethod
    def unique_ids(cls, v: List[VolumeEntry]) -> List[VolumeEntry]:
        ids = [vol.id for vol in v]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate volume ids in manifest: {ids}")
        return v

    @property
    def volume_ids(self) -> List[str]:
        return sorted(vol.id for vol in self.volumes)

    def _resolve(self, relative: str) -> Path:
        path = Path(relative)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def iter_slices(self, volumes: Optional[List[str]] = None) -> Iterator[SliceRef]:
        """Yield slices sorted by (volume id, slice index)."""
        wanted = set(volumes) if volumes is not None else None
        for vol in sorted(self.volumes, key=lambda v: v.id):
            if wanted is not None and vol.id not in wanted:
                continue
            for entry in vol.slices:
                yield SliceRef(
                    volume=vol.id,
                    index=entry.index,
                    image=self._resolve(entry.image),
                    mask=self._resolve(entry.mask) if entry.mask else None,
                )


class RoundEntry(BaseModel):
    f: int = Field(..., ge=0)
    thr: float
    pol: int
    alpha: float

    @field_validator("pol")
    @classmethod
    def unit_polarity(cls, v: int) -> int:
        if v not in (-1, 1):
            raise ValueError("pol must be +1 or -1")
        return v

    @field_validator("thr", "alpha")
    @classmethod
    def finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        return v


class ModelFile(BaseModel):
    T: int = Field(..., ge=1)
    n_features: int = Field(54, ge=1)
    rounds: List[RoundEntry]

    @model_validator(mode="after")
    def consistent(self) -> "ModelFile":
        if len(self.rounds) > self.T:
            raise ValueError("more rounds than T")
        if any(r.f >= self.n_features for r in self.rounds):
            raise ValueError("feature index out of range")
        return self


class KeypointsModel(BaseModel):
    bone_centroid: Tuple[float, float]
    distal_point: Tuple[float, float]
    hull: List[Tuple[float, float]]


class AtlasMuscleEntry(BaseModel):
    peak: int = Field(..., ge=0)
    file: str


class AtlasMetadata(BaseModel):
    reference_dims: Tuple[int, int]
    contributors: int = Field(..., ge=1)
    muscles: Dict[int, AtlasMuscleEntry]
    reference_keypoints: KeypointsModel
    palette: Dict[int, str] = Field(default_factory=dict)


class PhantomSpec(BaseModel):
    """Synthetic thigh slice geometry and texture; every field has a default."""

    seed: int = Field(0, ge=0, lt=2 ** 64)
    width: int = Field(256, ge=64)
    height: int = Field(256, ge=64)
    muscles: int = Field(6, ge=2, le=254, description="Muscle compartment count K")
    slices: int = Field(5, ge=1, description="Slices per volume")

    body_center: Tuple[float, float] = (128.0, 128.0)
    body_axes: Tuple[float, float] = (116.0, 100.0)
    body_rotation: float = 0.0
    fat_thickness: float = Field(10.0, gt=0.0)
    bone_center: Tuple[float, float] = (112.0, 136.0)
    bone_radius: float = Field(14.0, gt=0.0)
    marrow_radius: float = Field(7.0, ge=0.0)
    septum_width: float = Field(2.0, gt=0.0)
    compartment_rotation: float = 0.0

    bone_band: Tuple[float, float] = (0.05, 0.15)
    muscle_band: Tuple[float, float] = (0.35, 0.55)
    fat_band: Tuple[float, float] = (0.75, 0.95)
    septa_intensity: float = Field(0.8, ge=0.0, le=1.0)
    bone_noise: float = Field(0.02, ge=0.0)
    muscle_noise: float = Field(0.04, ge=0.0)
    fat_noise: float = Field(0.03, ge=0.0)
    striation_amplitude: float = Field(0.05, ge=0.0)
    striation_frequency: float = Field(0.25, gt=0.0, description="Cycles per pixel")
    striation_orientation: float = 0.0
    band_overlap: float = Field(0.0, ge=0.0, le=1.0, description="Pulls muscle and fat bands together")
    bone_level: float = Field(0.5, ge=0.0, le=1.0, description="Mean position inside the bone band")
    muscle_level: float = Field(0.5, ge=0.0, le=1.0, description="Mean position inside the muscle band")
    fat_level: float = Field(0.5, ge=0.0, le=1.0, description="Mean position inside the fat band")

    slice_jitter: float = Field(1.0, ge=0.0, description="Max boundary shift between slices, pixels")
    volume_variability: float = Field(1.0, ge=0.0)

    @field_validator("bone_band", "muscle_band", "fat_band")
    @classmethod
    def band_in_unit(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"intensity band {v} must satisfy 0 <= low <= high <= 1")
        return v

    @model_validator(mode="after")
    def ordered_bands(self) -> "PhantomSpec":
        if not (self.mean("bone") < self.mean("muscle") < self.mean("fat")):
            raise ValueError("band means must be ordered bone < muscle < fat")
        if self.marrow_radius >= self.bone_radius:
            raise ValueError("marrow_radius must be smaller than bone_radius")
        return self

    def _overlap_shift(self) -> float:
        gap = sum(self.fat_band) / 2.0 - sum(self.muscle_band) / 2.0
        return 0.45 * self.band_overlap * gap

    def band(self, tissue: str) -> Tuple[float, float]:
        """Effective intensity band of a tissue after the overlap shift."""
        if tissue == "bone":
            return self.bone_band
        shift = self._overlap_shift()
        if tissue == "muscle":
            lo, hi = self.muscle_band
            return (min(lo + shift, 1.0), min(hi + shift, 1.0))
        if tissue == "fat":
            lo, hi = self.fat_band
            return (max(lo - shift, 0.0), max(hi - shift, 0.0))
        raise ValueError(f"unknown tissue {tissue!r}")

    def mean(self, tissue: str) -> float:
        lo, hi = self.band(tissue)
        level = {"bone": self.bone_level, "muscle": self.muscle_level, "fat": self.fat_level}[tissue]
        return lo + level * (hi - lo)
