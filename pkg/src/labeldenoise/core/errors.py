"""Exception hierarchy shared by the labeldenoise core modules."""
from __future__ import annotations


class LabelDenoiseError(Exception):
    """Base class for every error raised by labeldenoise."""


class ConfigError(LabelDenoiseError, ValueError):
    """Invalid hyper-parameter, spec or method selection."""


class InputError(LabelDenoiseError, ValueError):
    """Tensor shapes, ranges or values violate an operation's preconditions."""


class DatasetError(LabelDenoiseError):
    """A dataset directory is missing, truncated or inconsistent with its manifest."""


class CheckpointError(LabelDenoiseError):
    """A checkpoint file cannot be loaded or does not match what the caller expects."""


class TrainingDivergedError(LabelDenoiseError, RuntimeError):
    """The training objective became non-finite."""


class RunDirectoryExistsError(LabelDenoiseError, FileExistsError):
    """The output directory already holds a run manifest and ``force`` was not given."""
