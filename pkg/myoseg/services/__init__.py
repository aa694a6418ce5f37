"""Service layer components for the segmentation pipeline."""

from .atlas import Alignment, MuscleAtlas, build_atlas, label_segmentation
from .boost import StrongClassifier, StumpBoostClassifier, train_adaboost
from .features import assemble_descriptor
from .imgio import GrayImage, LabelMask
from .metrics import EvalReport
from .pipeline import cross_validate

__all__ = [
    "Alignment",
    "EvalReport",
    "GrayImage",
    "LabelMask",
    "MuscleAtlas",
    "StrongClassifier",
    "StumpBoostClassifier",
    "assemble_descriptor",
    "build_atlas",
    "cross_validate",
    "label_segmentation",
    "train_adaboost",
]
