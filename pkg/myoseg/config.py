"""Runtime configuration for segmentation runs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import DataError

CONFIG_ECHO_NAME = "run_config.json"


class RunConfig(BaseSettings):
    """Every tunable of the pipeline, with the published parameter values as defaults."""

    model_config = SettingsConfigDict(
        env_prefix="MYOSEG_",
        extra="ignore",
        env_ignore_empty=True,
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    seed: int = Field(0, ge=0, description="Seed for every random choice of a run")

    # Descriptor
    block_size: int = Field(16, ge=8, description="Block edge in pixels")
    hog_orientations: int = Field(9, ge=2, description="Unsigned HOG orientation bins")
    hog_clip: float = Field(0.2, gt=0.0, le=1.0, description="HOG clipping bound")
    hog_epsilon: float = Field(1e-4, gt=0.0, description="HOG normalization guard")
    log_sigma: float = Field(1.5, gt=0.0, description="LoG standard deviation")
    log_size: int = Field(5, ge=3, description="LoG kernel edge in taps")
    dwt_levels: int = Field(3, ge=1, le=6, description="Haar decomposition depth")

    # Classifier
    boosting_rounds: int = Field(500, ge=1, description="AdaBoost rounds")
    erosion_radius: int = Field(2, ge=0, description="Disk radius eroding training labels")

    # Atlas
    bone_area_min: int = Field(100, ge=1, description="Smallest bone component area")
    bone_area_max: int = Field(3000, ge=1, description="Largest bone component area")
    atlas_reference: Optional[int] = Field(
        None, ge=0, description="Training slice used as atlas frame; seeded choice if unset"
    )

    # Execution
    n_jobs: int = Field(1, description="joblib workers for slices and folds")
    log_level: str = Field("INFO", description="Logging level")
    manifest_path: Optional[Path] = Field(None, description="Dataset manifest of the run")
    output_dir: Optional[Path] = Field(None, description="Directory receiving run outputs")

    @field_validator("log_size")
    @classmethod
    def odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("log_size must be odd")
        return v

    @field_validator("log_level")
    @classmethod
    def known_level(cls, v: str) -> str:
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Invalid log level: {v}")
        return level

    @model_validator(mode="after")
    def validate_settings(self) -> "RunConfig":
        """Validate interdependent settings."""
        if self.block_size % (2 ** self.dwt_levels) != 0:
            raise ValueError(
                f"block_size {self.block_size} must be divisible by 2**dwt_levels ({2 ** self.dwt_levels})"
            )
        if self.bone_area_min >= self.bone_area_max:
            raise ValueError("bone_area_min must be smaller than bone_area_max")
        return self

    @property
    def descriptor_length(self) -> int:
        return 4 * self.hog_orientations + 8 + 1 + 3 * self.dwt_levels

    def descriptor_params(self) -> Dict[str, Any]:
        """Keyword arguments for features.assemble_descriptor."""
        return {
            "block_size": self.block_size,
            "orientations": self.hog_orientations,
            "clip": self.hog_clip,
            "epsilon": self.hog_epsilon,
            "log_size": self.log_size,
            "log_sigma": self.log_sigma,
            "levels": self.dwt_levels,
        }

    def echo(self, directory: Path) -> Path:
        """Write the resolved configuration next to the outputs it produced."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / CONFIG_ECHO_NAME
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        return path


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve defaults < environment < JSON file < explicit overrides.

    Raises:
        DataError: if the config file is missing or not a JSON object.
        pydantic.ValidationError: if a value is out of range.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise DataError(f"Config file not found: {config_path}")
        try:
            loaded = json.loads(config_path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"Config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise DataError(f"Config file {config_path} must hold a JSON object")
        values.update(loaded)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


__all__ = ["RunConfig", "load_run_config", "CONFIG_ECHO_NAME", "ValidationError"]
