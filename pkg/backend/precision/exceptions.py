"""
Error hierarchy shared by the precision app.

Library code raises these; the `ldp` management command turns any LDPError
into a CommandError so the process exits non-zero with the message on stderr.
"""


class LDPError(Exception):
    """Base class for every error raised by the precision app."""


class ShapeError(LDPError, ValueError):
    """Tensor shapes or dimensions do not line up."""


class RangeError(LDPError, ValueError):
    """A value falls outside its allowed range."""


class AutodiffError(LDPError):
    """The tape cannot run the requested backward pass."""


class OptimizerError(LDPError):
    """A parameter cannot be updated."""


class CostModelError(LDPError):
    """BitOPs accounting received inputs it cannot price."""


class ScheduleError(LDPError):
    """A precision schedule or schedule log is malformed."""


class CoverageError(ScheduleError):
    """A replay log does not cover every (iteration, layer) of a run."""

    def __init__(self, message, missing_iteration=None):
        super().__init__(message)
        self.missing_iteration = missing_iteration


class DatasetError(LDPError):
    """A dataset file is malformed or inconsistent."""


class CheckpointError(LDPError):
    """A checkpoint file is malformed or does not fit the model/dataset."""


class ConfigError(LDPError):
    """A run configuration is malformed or invalid."""

    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class DivergenceError(LDPError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
