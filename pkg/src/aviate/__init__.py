"""Obstacle avoidance for a depth-camera drone among static and moving obstacles."""

from .core import (
    CameraModel,
    ClassifierConfig,
    ConfigError,
    FilterConfig,
    Frame,
    KalmanConfig,
    PlannerConfig,
    PointCloudFrame,
    PoseState,
    StackConfig,
    TimingModel,
    TrackerConfig,
)

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "ClassifierConfig",
    "ConfigError",
    "FilterConfig",
    "Frame",
    "KalmanConfig",
    "PlannerConfig",
    "PointCloudFrame",
    "PoseState",
    "StackConfig",
    "TimingModel",
    "TrackerConfig",
]
