"""Composite 3D Gaussian scene graphs with wavelet-modulated appearance.

A dynamic scene is a static background node plus rigid object nodes, each
holding a set of anisotropic 3D Gaussians. Object appearance is view- and
time-dependent: spherical-harmonic coefficients are realized as learnable
Ricker-wavelet expansions over normalized scene time. The package covers
ingestion (LiDAR + tracked boxes), differentiable software rasterization,
optimization, evaluation, and post-training scene editing.
"""

__version__ = "0.1.0"

from .geom import BoundingBox3D, CameraModel, Pose, build_covariance, camera_covariance, project_point
from .scenegraph import GaussianSet, ObjectNode, SceneGraph, Trajectory, compose, pose_at, transform_node
from .rasterizer import RasterSettings, RenderOutput, Splat2D, rasterize_forward, rasterize_reference

__all__ = [
    "BoundingBox3D",
    "CameraModel",
    "GaussianSet",
    "ObjectNode",
    "Pose",
    "RasterSettings",
    "RenderOutput",
    "SceneGraph",
    "Splat2D",
    "Trajectory",
    "build_covariance",
    "camera_covariance",
    "compose",
    "pose_at",
    "project_point",
    "rasterize_forward",
    "rasterize_reference",
    "transform_node",
]
