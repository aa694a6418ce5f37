"""Stage orchestration: descriptors per slice, training, atlas, prediction and cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ..config import RunConfig
from ..exceptions import DataError, MyosegError, PipelineError
from ..schemas import DatasetManifest, SliceRef
from .atlas import MuscleAtlas, build_atlas, label_segmentation
from .boost import (
    StrongClassifier,
    TrainingSet,
    blocks_to_mask,
    predict_blocks,
    train_adaboost,
    training_set_for_slice,
)
from .features import assemble_descriptor, feature_names
from .imgio import GrayImage, LabelMask, check_manifest_paths, load_image, load_mask, save_mask, save_overlay
from .metrics import EvalReport, label_dice, score_masks
from .preproc import BlockGrid, grid_of
from .telemetry import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class SliceData:
    """A loaded slice with its block descriptors."""

    ref: SliceRef
    image: GrayImage
    mask: Optional[LabelMask]
    descriptors: np.ndarray
    grid: BlockGrid


def load_slice(ref: SliceRef, config: RunConfig, require_mask: bool = False) -> SliceData:
    image = load_image(ref.image)
    mask = None
    if ref.mask is not None:
        mask = load_mask(ref.mask, expected_dims=image.dims)
    elif require_mask:
        raise DataError(f"volume {ref.volume} slice {ref.index}: no ground-truth mask")
    descriptors = assemble_descriptor(image, **config.descriptor_params())
    return SliceData(ref, image, mask, descriptors, grid_of(image, config.block_size))


def select_volumes(
    manifest: DatasetManifest,
    include: Optional[Sequence[str]] = None,
    exclude: Optional[Sequence[str]] = None,
) -> List[str]:
    """Volume ids after inclusion and exclusion filters; unknown ids are a DataError."""
    known = manifest.volume_ids
    unknown = sorted((set(include or ()) | set(exclude or ())) - set(known))
    if unknown:
        raise DataError(f"unknown volume ids: {', '.join(unknown)}")
    chosen = [v for v in known if include is None or v in include]
    return [v for v in chosen if v not in set(exclude or ())]


def load_slices(
    manifest: DatasetManifest,
    config: RunConfig,
    volumes: Optional[Sequence[str]] = None,
    require_masks: bool = False,
) -> List[SliceData]:
    """Load and describe every selected slice in (volume, index) order."""
    refs = list(manifest.iter_slices(list(volumes) if volumes is not None else None))
    if not refs:
        raise DataError("no slices selected from the manifest")
    slices = Parallel(n_jobs=config.n_jobs)(delayed(load_slice)(ref, config, require_masks) for ref in refs)
    logger.info(
        "features_extracted",
        slices=len(slices),
        blocks=int(sum(s.grid.count for s in slices)),
        descriptor_length=config.descriptor_length,
    )
    return list(slices)


def feature_table(slices: Sequence[SliceData]) -> pd.DataFrame:
    """One row per block: ``volume,slice,row,col,f00..``."""
    frames = []
    for data in slices:
        rows, cols = np.divmod(np.arange(data.grid.count), data.grid.cols)
        frame = pd.DataFrame(
            data.descriptors.reshape(data.grid.count, -1), columns=feature_names(data.descriptors.shape[-1])
        )
        frame.insert(0, "col", cols)
        frame.insert(0, "row", rows)
        frame.insert(0, "slice", data.ref.index)
        frame.insert(0, "volume", data.ref.volume)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def fit_classifier(slices: Sequence[SliceData], config: RunConfig) -> StrongClassifier:
    parts = []
    for data in slices:
        if data.mask is None:
            raise DataError(f"volume {data.ref.volume} slice {data.ref.index}: training needs a mask")
        parts.append(
            training_set_for_slice(
                data.descriptors, data.mask, data.grid, config.erosion_radius, data.ref.volume, data.ref.index
            )
        )
    return train_adaboost(TrainingSet.concatenate(parts), config.boosting_rounds)


def reference_index(n_slices: int, config: RunConfig) -> int:
    """Configured atlas reference, or a seeded draw among the training slices."""
    if config.atlas_reference is not None:
        if config.atlas_reference >= n_slices:
            raise DataError(f"atlas_reference {config.atlas_reference} outside 0..{n_slices - 1}")
        return config.atlas_reference
    return int(np.random.default_rng(config.seed).integers(n_slices))


def fit_atlas(slices: Sequence[SliceData], config: RunConfig) -> MuscleAtlas:
    masks = []
    for data in slices:
        if data.mask is None:
            raise DataError(f"volume {data.ref.volume} slice {data.ref.index}: atlas needs a mask")
        masks.append(data.mask)
    return build_atlas(
        masks,
        [d.image for d in slices],
        reference_index(len(slices), config),
        config.bone_area_min,
        config.bone_area_max,
        provenance=[d.ref.key for d in slices],
    )


def predict_slice(clf: StrongClassifier, data: SliceData) -> LabelMask:
    _, labels = predict_blocks(clf, data.descriptors)
    return blocks_to_mask(labels, data.grid, data.image.dims)


def label_slice(binary: LabelMask, data: SliceData, atlas: MuscleAtlas, config: RunConfig) -> LabelMask:
    return label_segmentation(binary, data.image, atlas, config.bone_area_min, config.bone_area_max)


def write_slice_outputs(
    out_dir: Path, ref: SliceRef, image: GrayImage, binary: LabelMask, labeled: Optional[LabelMask] = None
) -> None:
    """``{volume}/{index}_binary.png``, ``_labels.png`` when labeled, and an overlay."""
    stem = Path(out_dir) / ref.volume / f"{ref.index:03d}"
    save_mask(binary, f"{stem}_binary.png")
    if labeled is not None:
        save_mask(labeled, f"{stem}_labels.png")
    save_overlay(image, labeled if labeled is not None else binary, f"{stem}_overlay.png")


def _failure(ref: SliceRef, stage: str, error: Exception) -> Dict:
    logger.warning("slice_failed", volume=ref.volume, slice=ref.index, stage=stage, error=str(error))
    return {"volume": ref.volume, "slice": ref.index, "stage": stage, "error": str(error)}


@dataclass
class SliceOutcome:
    ref: SliceRef
    binary: Optional[LabelMask] = None
    labeled: Optional[LabelMask] = None


@dataclass
class FoldResult:
    volume: str
    outcomes: List[SliceOutcome] = field(default_factory=list)
    slices: List[Dict] = field(default_factory=list)
    labels: List[Dict] = field(default_factory=list)
    failures: List[Dict] = field(default_factory=list)


def run_fold(volume: str, train: Sequence[SliceData], test: Sequence[SliceData], config: RunConfig) -> FoldResult:
    """Train on ``train``, then predict, label and score every ``test`` slice.

    Stage failures are recorded per slice; a labeling failure keeps the
    binary result and its metrics.
    """
    result = FoldResult(volume=volume)
    try:
        clf = fit_classifier(train, config)
    except PipelineError as e:
        result.failures.extend(_failure(d.ref, "train", e) for d in test)
        return result

    atlas: Optional[MuscleAtlas] = None
    atlas_error: Optional[Exception] = None
    try:
        atlas = fit_atlas(train, config)
    except MyosegError as e:
        atlas_error = e

    for data in test:
        outcome = SliceOutcome(ref=data.ref)
        result.outcomes.append(outcome)
        try:
            outcome.binary = predict_slice(clf, data)
        except MyosegError as e:
            result.failures.append(_failure(data.ref, "predict", e))
            continue
        result.slices.append({"volume": data.ref.volume, "slice": data.ref.index, **score_masks(outcome.binary, data.mask)})

        if atlas is None:
            result.failures.append(_failure(data.ref, "atlas", atlas_error))
            continue
        try:
            outcome.labeled = label_slice(outcome.binary, data, atlas, config)
        except PipelineError as e:
            result.failures.append(_failure(data.ref, "label", e))
            continue
        result.labels.extend(
            {"volume": data.ref.volume, "slice": data.ref.index, "muscle": muscle, "dice": value}
            for muscle, value in label_dice(outcome.labeled, data.mask).items()
        )

    dice = [row["dice"] for row in result.slices]
    logger.info(
        "fold_complete",
        volume=volume,
        train_slices=len(train),
        test_slices=len(test),
        mean_dice=float(np.mean(dice)) if dice else None,
        failures=len(result.failures),
    )
    return result


def cross_validate(
    manifest: DatasetManifest, config: RunConfig, out_dir: Optional[Union[str, Path]] = None
) -> EvalReport:
    """Leave-one-volume-out evaluation; masks and overlays go under ``out_dir`` when given."""
    volumes = manifest.volume_ids
    if len(volumes) < 2:
        raise DataError(f"cross-validation needs at least 2 volumes, got {len(volumes)}")
    check_manifest_paths(manifest, require_masks=True)

    try:
        slices = load_slices(manifest, config, require_masks=True)
        folds = Parallel(n_jobs=config.n_jobs)(
            delayed(run_fold)(
                volume,
                [s for s in slices if s.ref.volume != volume],
                [s for s in slices if s.ref.volume == volume],
                config,
            )
            for volume in volumes
        )
    except Exception as e:
        logger.error("crossval_failed", error=str(e))
        raise

    images = {s.ref.key: s.image for s in slices}
    if out_dir is not None:
        for fold in folds:
            for outcome in fold.outcomes:
                if outcome.binary is not None:
                    write_slice_outputs(Path(out_dir), outcome.ref, images[outcome.ref.key], outcome.binary, outcome.labeled)

    report = EvalReport.from_records(
        [row for fold in folds for row in fold.slices],
        [row for fold in folds for row in fold.labels],
        [row for fold in folds for row in fold.failures],
    )
    logger.info("crossval_complete", folds=len(folds), **report.overall(), failures=len(report.failures))
    return report


__all__ = [
    "SliceData",
    "FoldResult",
    "SliceOutcome",
    "load_slice",
    "load_slices",
    "select_volumes",
    "feature_table",
    "fit_classifier",
    "fit_atlas",
    "reference_index",
    "predict_slice",
    "label_slice",
    "write_slice_outputs",
    "run_fold",
    "cross_validate",
]
