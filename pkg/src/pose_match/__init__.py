"""Zero-shot object matching and 6D pose estimation on point clouds, at toy scale."""

from .errors import NonConvergenceWarning, PoseMatchError
from .geometry import BBox2D, Camera, NormalizationInfo, PointCloud, Pose, kabsch_weighted
from .network import ModelConfig, ModelWeights, init_weights, load_weights
from .pipeline import PipelineConfig, PoseEstimate, estimate_pose

__all__ = [
    "BBox2D", "Camera", "ModelConfig", "ModelWeights", "NonConvergenceWarning", "NormalizationInfo",
    "PipelineConfig", "PointCloud", "Pose", "PoseEstimate", "PoseMatchError", "estimate_pose",
    "init_weights", "kabsch_weighted", "load_weights",
]
