"""Exception hierarchy shared by the services and the CLI."""

from __future__ import annotations


class MyosegError(Exception):
    """Base class for all pipeline errors."""


class DataError(MyosegError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class PipelineError(MyosegError, RuntimeError):
    """A processing stage could not produce its result."""


class BoneNotFoundError(PipelineError):
    """No bone-like component was found in a slice."""


class KeypointError(PipelineError):
    """Keypoints could not be derived from a foreground mask."""


class TrainingError(PipelineError):
    """The boosting stage received an unusable training set."""
