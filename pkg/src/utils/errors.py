# src/utils/errors.py


class TreeLabelError(RuntimeError):
    code = "treelabel_error"


class ConfigError(TreeLabelError):
    code = "config_error"


class VolumeFormatError(TreeLabelError):
    code = "volume_format"


class SkeletonError(TreeLabelError):
    code = "skeleton_error"


class SpatialIndexError(TreeLabelError):
    code = "spatial_index"


class ShapeError(TreeLabelError):
    code = "shape_mismatch"


class GradCheckError(TreeLabelError):
    code = "gradcheck"


class SynthError(TreeLabelError):
    code = "synth_error"


class TrainingDivergedError(TreeLabelError):
    code = "diverged"

    def __init__(self, message: str, report: dict = None):
        super().__init__(message)
        self.report = report or {}


class MetricError(TreeLabelError):
    code = "metric_error"


class CheckpointError(TreeLabelError):
    code = "checkpoint_error"
