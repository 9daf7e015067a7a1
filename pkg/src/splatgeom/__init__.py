"""Differential geometry of point sets and geometry-aware Gaussian splat operations."""
from .types import (
    CurvatureInfo,
    EstimateResult,
    EstimatorConfig,
    FrameSet,
    GaussianPrimitive,
    LocalFrame,
    PointCloud,
    primitive_covariance,
    validate,
)

__all__ = [
    "CurvatureInfo",
    "EstimateResult",
    "EstimatorConfig",
    "FrameSet",
    "GaussianPrimitive",
    "LocalFrame",
    "PointCloud",
    "primitive_covariance",
    "validate",
]
__version__ = "0.1.0"
