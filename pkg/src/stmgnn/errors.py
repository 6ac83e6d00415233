"""Exception hierarchy shared by every module; the CLI maps each to an exit code."""


class StmgnnError(Exception):
    exit_code = 1


class ConfigError(StmgnnError):
    """Unknown key, bad value, or a config/weights manifest mismatch."""

    exit_code = 2


class DataError(StmgnnError):
    """Malformed or insufficient input data."""

    exit_code = 3


class NumericalError(StmgnnError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 4


class TrainingDiverged(NumericalError):
    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


def first_bad_index(values):
    """Index tuple of the first non-finite entry of ``values``."""
    import numpy as np

    bad = np.argwhere(~np.isfinite(np.asarray(values)))
    return tuple(int(i) for i in bad[0]) if len(bad) else None
