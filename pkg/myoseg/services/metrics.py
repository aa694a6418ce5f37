"""Pixel overlap metrics and the per-volume evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from ..exceptions import DataError
from .imgio import LabelMask

MaskLike = Union[LabelMask, np.ndarray]

METRICS = ("recall", "precision", "dice")
SLICE_COLUMNS = ["volume", "slice", *METRICS]
SUMMARY_COLUMNS = ["volume", "metric", "mean", "std"]
LABEL_COLUMNS = ["volume", "slice", "muscle", "dice"]
FAILURE_COLUMNS = ["volume", "slice", "stage", "error"]


def _labels(mask: MaskLike) -> np.ndarray:
    return mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: MaskLike, truth: MaskLike) -> ConfusionCounts:
    """Pixel counts with any label > 0 treated as muscle."""
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise DataError(f"mask shapes differ: prediction {p.shape}, truth {t.shape}")
    (tn, fp), (fn, tp) = confusion_matrix(t.ravel() > 0, p.ravel() > 0, labels=[False, True])
    return ConfusionCounts(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


def _ratio(num: int, den: int, other_empty: bool) -> float:
    if den == 0:
        return 1.0 if other_empty else 0.0
    return num / den


def recall(c: ConfusionCounts) -> float:
    """TP / (TP + FN); an empty truth scores 1 only against an empty prediction."""
    return _ratio(c.tp, c.tp + c.fn, c.tp + c.fp == 0)


def precision(c: ConfusionCounts) -> float:
    """TP / (TP + FP); an empty prediction scores 1 only against an empty truth."""
    return _ratio(c.tp, c.tp + c.fp, c.tp + c.fn == 0)


def dice_from_counts(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, True)


def dice(pred: MaskLike, truth: MaskLike) -> float:
    return dice_from_counts(confusion(pred, truth))


def score_masks(pred: MaskLike, truth: MaskLike) -> Dict[str, float]:
    c = confusion(pred, truth)
    return {"recall": recall(c), "precision": precision(c), "dice": dice_from_counts(c)}


def label_dice(pred: MaskLike, truth: MaskLike) -> Dict[int, float]:
    """Dice per muscle id present in either mask."""
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise DataError(f"mask shapes differ: prediction {p.shape}, truth {t.shape}")
    ids = sorted(set(np.unique(p).tolist()) | set(np.unique(t).tolist()))
    return {int(i): dice(p == i, t == i) for i in ids if i > 0}


def summarize(slices: pd.DataFrame) -> pd.DataFrame:
    """Per-volume mean and population std of each metric, long format."""
    if slices.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    grouped = slices.groupby("volume", sort=True)[list(METRICS)]
    means = grouped.mean()
    stds = grouped.std(ddof=0)
    rows = [
        (volume, metric, float(means.at[volume, metric]), float(stds.at[volume, metric]))
        for volume in means.index
        for metric in METRICS
    ]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


@dataclass
class EvalReport:
    """Slice metrics, optional per-muscle Dice and failure records."""

    slices: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=SLICE_COLUMNS))
    labels: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=LABEL_COLUMNS))
    failures: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=FAILURE_COLUMNS))

    @classmethod
    def from_records(
        cls,
        slices: Iterable[Mapping],
        labels: Iterable[Mapping] = (),
        failures: Iterable[Mapping] = (),
    ) -> "EvalReport":
        def frame(records: Iterable[Mapping], columns: List[str], keys: List[str]) -> pd.DataFrame:
            df = pd.DataFrame(list(records), columns=columns)
            return df.sort_values(keys, kind="stable").reset_index(drop=True) if not df.empty else df

        return cls(
            slices=frame(slices, SLICE_COLUMNS, ["volume", "slice"]),
            labels=frame(labels, LABEL_COLUMNS, ["volume", "slice", "muscle"]),
            failures=frame(failures, FAILURE_COLUMNS, ["volume", "slice"]),
        )

    @property
    def summary(self) -> pd.DataFrame:
        return summarize(self.slices)

    def overall(self) -> Dict[str, float]:
        return {m: float(self.slices[m].mean()) for m in METRICS} if not self.slices.empty else {}

    def muscle_means(self) -> Dict[int, float]:
        if self.labels.empty:
            return {}
        means = self.labels.groupby("muscle", sort=True)["dice"].mean()
        return {int(k): float(v) for k, v in means.items()}

    def to_dict(self) -> Dict:
        volumes: Dict[str, Dict[str, Dict[str, float]]] = {}
        for row in self.summary.itertuples(index=False):
            volumes.setdefault(row.volume, {})[row.metric] = {"mean": row.mean, "std": row.std}
        return {
            "volumes": volumes,
            "overall": self.overall(),
            "muscles": {str(k): v for k, v in self.muscle_means().items()},
            "slices": int(len(self.slices)),
            "failures": int(len(self.failures)),
        }

    def write(self, directory: Union[str, Path]) -> None:
        """Write slices.csv, summary.csv, labels.csv, failures.csv and report.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.slices.to_csv(directory / "slices.csv", index=False)
        self.summary.to_csv(directory / "summary.csv", index=False)
        self.labels.to_csv(directory / "labels.csv", index=False)
        self.failures.to_csv(directory / "failures.csv", index=False)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


__all__ = [
    "ConfusionCounts",
    "EvalReport",
    "confusion",
    "recall",
    "precision",
    "dice",
    "dice_from_counts",
    "label_dice",
    "score_masks",
    "summarize",
]
