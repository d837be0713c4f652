"""Exception hierarchy shared by the library, the service and the CLI.

Two broad categories exist so the service and the CLI can map failures to
stable exit codes / HTTP statuses: `InputError` covers bad arguments and
malformed files (CLI exit 2), `PipelineError` covers runtime or algorithmic
failures on valid input (CLI exit 3).
"""


class EpimatchError(Exception):
    """Base class for all errors raised by this package."""


class InputError(EpimatchError):
    """Invalid argument, malformed file or inconsistent shapes."""


class FormatError(InputError):
    """A binary container failed header or payload validation."""


class PipelineError(EpimatchError):
    """A computation failed on otherwise valid input."""


class BehindCameraError(PipelineError):
    """Projection requested for a point at or behind the camera plane."""


class DegenerateMotionError(PipelineError):
    """Pure-rotation pose: the fundamental matrix is undefined."""


class DegenerateLineError(PipelineError):
    """Epipolar line with a vanishing (a, b) normal."""


class DegeneratePatchError(PipelineError):
    """Constant patch: the cross-power spectrum carries no signal."""


class InsufficientDataError(PipelineError):
    """Too few correspondences for the requested estimator."""


class EstimationFailedError(PipelineError):
    """Every RANSAC hypothesis was degenerate."""


class UndefinedMetricError(PipelineError):
    """A metric was requested on an empty correspondence set."""


class TrainingStalledError(PipelineError):
    """A whole training epoch yielded no triplets."""
