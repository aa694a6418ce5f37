"""Block labels from ground truth and discrete AdaBoost over decision stumps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy import ndimage
from skimage.morphology import disk
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..exceptions import DataError, TrainingError
from ..schemas import ModelFile, RoundEntry
from .features import DESCRIPTOR_LENGTH
from .imgio import LabelMask
from .preproc import BlockGrid
from .telemetry import get_logger

logger = get_logger(__name__)

BOOSTING_ROUNDS = 500
EROSION_RADIUS = 2
EPS_FLOOR = 1e-10
ERROR_DECIMALS = 12
# Largest finite double: the model file holds JSON numbers, so no infinities.
OPEN_THRESHOLD = float(np.finfo(np.float64).max)


@dataclass(frozen=True)
class Stump:
    """h(x) = polarity if x[feature_index] > threshold else -polarity."""

    feature_index: int
    threshold: float
    polarity: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        above = X[:, self.feature_index] > self.threshold
        return np.where(above, self.polarity, -self.polarity).astype(np.float64)


@dataclass(frozen=True)
class RoundRecord:
    t: int
    eps: float
    alpha: float
    train_err: float
    exp_loss: float


@dataclass(frozen=True, eq=False)
class StrongClassifier:
    rounds: Tuple[Tuple[Stump, float], ...]
    T: int = BOOSTING_ROUNDS
    n_features: int = DESCRIPTOR_LENGTH
    history: Tuple[RoundRecord, ...] = field(default_factory=tuple)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"descriptors must have {self.n_features} features, got shape {X.shape}")
        score = np.zeros(X.shape[0])
        for stump, alpha in self.rounds:
            score += alpha * stump.predict(X)
        return score

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(self.decision_function(X) > 0, 1, -1)

    def to_model_file(self) -> ModelFile:
        return ModelFile(
            T=self.T,
            n_features=self.n_features,
            rounds=[
                RoundEntry(f=s.feature_index, thr=s.threshold, pol=s.polarity, alpha=a)
                for s, a in self.rounds
            ],
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_model_file().model_dump_json(indent=2) + "\n")
        logger.info("model_saved", path=str(path), rounds=len(self.rounds))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "StrongClassifier":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Model file not found: {path}")
        try:
            model = ModelFile.model_validate_json(path.read_text())
        except ValidationError as e:
            raise DataError(f"Invalid model file {path}: {e}") from e
        rounds = tuple((Stump(r.f, r.thr, r.pol), r.alpha) for r in model.rounds)
        return cls(rounds=rounds, T=model.T, n_features=model.n_features)

    def report(self) -> pd.DataFrame:
        """Per-round training history as the ``t,eps,alpha,train_err,exp_loss`` table."""
        columns = ["t", "eps", "alpha", "train_err", "exp_loss"]
        return pd.DataFrame([[getattr(r, c) for c in columns] for r in self.history], columns=columns)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    provenance: Tuple[Tuple[str, int, int, int], ...] = ()

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"training set shapes disagree: X {X.shape}, y {y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("training features must be finite")
        if not np.all(np.isin(y, (-1, 1))):
            raise DataError("training labels must be -1 or +1")
        if self.provenance and len(self.provenance) != X.shape[0]:
            raise DataError("provenance length disagrees with the sample count")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int64))

    def __len__(self) -> int:
        return int(self.X.shape[0])

    @classmethod
    def concatenate(cls, parts: Sequence["TrainingSet"]) -> "TrainingSet":
        if not parts:
            raise TrainingError("no training data")
        X = np.concatenate([p.X for p in parts], axis=0)
        y = np.concatenate([p.y for p in parts], axis=0)
        provenance = tuple(item for p in parts for item in p.provenance)
        return cls(X, y, provenance if len(provenance) == len(y) else ())


# --- labels ----------------------------------------------------------------


def erode_labels(mask: LabelMask, radius: int = EROSION_RADIUS) -> LabelMask:
    """Erode each label's support independently with a disk; vacated pixels become background."""
    if radius < 0:
        raise ValueError(f"erosion radius must be >= 0, got {radius}")
    if radius == 0:
        return mask
    footprint = disk(radius).astype(bool)
    out = np.zeros_like(mask.labels)
    for label_id in mask.label_ids:
        kept = ndimage.binary_erosion(mask.labels == label_id, structure=footprint)
        out[kept] = label_id
    return LabelMask(out, mask.palette)


def derive_block_labels(eroded: LabelMask, grid: BlockGrid) -> np.ndarray:
    """+1 where muscle pixels are a strict majority of the block, else -1."""
    bs = grid.block_size
    h, w = grid.covered_shape
    if eroded.height < h or eroded.width < w:
        raise DataError(f"mask {eroded.dims} does not cover a {grid.cols}x{grid.rows} block grid")
    fg = eroded.foreground[:h, :w].reshape(grid.rows, bs, grid.cols, bs)
    counts = fg.sum(axis=(1, 3))
    return np.where(2 * counts > bs * bs, 1, -1).astype(np.int64)


def blocks_to_mask(block_labels: np.ndarray, grid: BlockGrid, dims: Tuple[int, int]) -> LabelMask:
    """Paint each +1 block's footprint as label 1 on a (width, height) canvas."""
    width, height = dims
    h, w = grid.covered_shape
    if h > height or w > width:
        raise DataError(f"grid covering {w}x{h} does not fit {width}x{height}")
    block_labels = np.asarray(block_labels).reshape(grid.rows, grid.cols)
    painted = np.kron((block_labels > 0).astype(np.int32), np.ones((grid.block_size, grid.block_size), dtype=np.int32))
    out = np.zeros((height, width), dtype=np.int32)
    out[:h, :w] = painted
    return LabelMask(out, {1: "muscle"})


# --- boosting --------------------------------------------------------------


def _best_stump(X_sorted: np.ndarray, order: np.ndarray, y: np.ndarray, w: np.ndarray) -> Tuple[Stump, float]:
    """Exhaustive stump search using per-feature cumulative weights.

    A split after sorted position k predicts -p for the first k samples and p
    for the rest. k = 0 and k = N are the constant stumps; their thresholds are
    -OPEN_THRESHOLD and +OPEN_THRESHOLD so that they stay constant on values
    outside the training range and still serialize as finite numbers.
    """
    n, d = X_sorted.shape
    w_pos = np.where(y > 0, w, 0.0)[order]
    w_neg = np.where(y < 0, w, 0.0)[order]
    zero = np.zeros((1, d))
    pos_left = np.vstack([zero, np.cumsum(w_pos, axis=0)])
    neg_left = np.vstack([zero, np.cumsum(w_neg, axis=0)])
    total = w.sum()
    neg_total = neg_left[-1]

    err_plus = pos_left + (neg_total - neg_left)
    err_minus = total - err_plus

    valid = np.ones((n + 1, d), dtype=bool)
    valid[1:n] = X_sorted[1:] != X_sorted[:-1]
    # Rounded so cumulative-sum noise cannot reorder tied candidates.
    err_plus = np.where(valid, np.round(err_plus, ERROR_DECIMALS), np.inf)
    err_minus = np.where(valid, np.round(err_minus, ERROR_DECIMALS), np.inf)

    # Feature-major, then threshold, then polarity +1 before -1.
    errors = np.stack([err_plus.T, err_minus.T], axis=2)
    flat = int(np.argmin(errors))
    feature, k, which = np.unravel_index(flat, errors.shape)
    column = X_sorted[:, feature]
    if k == 0:
        threshold = -OPEN_THRESHOLD
    elif k == n:
        threshold = OPEN_THRESHOLD
    else:
        threshold = float(0.5 * (column[k - 1] + column[k]))
    polarity = 1 if which == 0 else -1
    return Stump(int(feature), threshold, polarity), float(errors[feature, k, which])


def train_adaboost(data: TrainingSet, T: int = BOOSTING_ROUNDS) -> StrongClassifier:
    """Discrete AdaBoost with exhaustive decision stumps.

    Stops early when no stump beats chance, or after recording a round with
    zero weighted error.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    n = len(data)
    if n < 2:
        raise TrainingError(f"need at least 2 samples, got {n}")
    if np.unique(data.y).size < 2:
        raise TrainingError("training set holds a single class")

    X, y = data.X, data.y.astype(np.float64)
    order = np.argsort(X, axis=0, kind="stable")
    X_sorted = np.take_along_axis(X, order, axis=0)
    w = np.full(n, 1.0 / n)
    score = np.zeros(n)
    rounds: List[Tuple[Stump, float]] = []
    history: List[RoundRecord] = []

    for t in range(1, T + 1):
        stump, eps = _best_stump(X_sorted, order, y, w)
        if eps >= 0.5:
            logger.info("boost_stopped_early", round=t, eps=eps, reason="no stump beats chance")
            break
        clamped = min(max(eps, EPS_FLOOR), 1.0 - EPS_FLOOR)
        alpha = 0.5 * math.log((1.0 - clamped) / clamped)
        h = stump.predict(X)
        score += alpha * h
        w = w * np.exp(-alpha * y * h)
        w /= w.sum()

        record = RoundRecord(
            t=t,
            eps=eps,
            alpha=alpha,
            train_err=float(np.mean(np.where(score > 0, 1.0, -1.0) != y)),
            exp_loss=float(np.mean(np.exp(-y * score))),
        )
        rounds.append((stump, alpha))
        history.append(record)
        logger.debug("boost_round", **record.__dict__, feature=stump.feature_index)
        if eps == 0.0:
            logger.info("boost_stopped_early", round=t, eps=eps, reason="training set separated")
            break

    logger.info("training_complete", samples=n, rounds=len(rounds), train_err=history[-1].train_err if history else None)
    return StrongClassifier(rounds=tuple(rounds), T=T, n_features=X.shape[1], history=tuple(history))


def predict_blocks(clf: StrongClassifier, descriptors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Scores and ±1 labels for a (rows, cols, n_features) descriptor array; sign(0) = -1."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.shape[-1] != clf.n_features:
        raise DataError(f"descriptor length {descriptors.shape[-1]} != {clf.n_features}")
    flat = descriptors.reshape(-1, clf.n_features)
    score = clf.decision_function(flat).reshape(descriptors.shape[:-1])
    return score, np.where(score > 0, 1, -1)


def training_set_for_slice(
    descriptors: np.ndarray,
    mask: LabelMask,
    grid: BlockGrid,
    erosion_radius: int = EROSION_RADIUS,
    volume: str = "",
    slice_index: int = 0,
) -> TrainingSet:
    """Block samples of one slice labeled from its eroded ground truth."""
    labels = derive_block_labels(erode_labels(mask, erosion_radius), grid)
    provenance = tuple((volume, slice_index, r, c) for r in range(grid.rows) for c in range(grid.cols))
    return TrainingSet(descriptors.reshape(grid.count, -1), labels.ravel(), provenance)


class StumpBoostClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn facade over train_adaboost for labels in {-1, +1}."""

    def __init__(self, n_rounds: int = BOOSTING_ROUNDS):
        self.n_rounds = n_rounds

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.array([-1, 1])
        self.model_ = train_adaboost(TrainingSet(X, y), self.n_rounds)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_array(X))

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, 1, -1)


def save_training_report(clf: StrongClassifier, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf.report().to_csv(path, index=False)


def load_model(path: Union[str, Path], expected_features: Optional[int] = None) -> StrongClassifier:
    clf = StrongClassifier.load(path)
    if expected_features is not None and clf.n_features != expected_features:
        raise DataError(f"model expects {clf.n_features} features, descriptor has {expected_features}")
    return clf


__all__ = [
    "Stump",
    "StrongClassifier",
    "TrainingSet",
    "RoundRecord",
    "erode_labels",
    "derive_block_labels",
    "blocks_to_mask",
    "train_adaboost",
    "predict_blocks",
    "training_set_for_slice",
    "StumpBoostClassifier",
    "save_training_report",
    "load_model",
]
