"""Dual-stage EKF stereo visual-inertial odometry.

A cascaded filter: a 7-state gyro/accelerometer attitude EKF runs at IMU
rate and seeds the propagation of a sliding-window stereo EKF that updates
from multi-view feature constraints. Ships with a synthetic sensor
simulator, dataset readers/writers, and trajectory evaluation metrics.
"""

from .config import DsVioConfig, KeyframePolicy, RunConfig, SimConfig
from .gyro_ekf import GyroNoiseParams, GyroState
from .pipeline import DsVioPipeline
from .state import (EkfState, FeatureTrack, FrameStats, ImuNoiseParams,
                    ImuSample, ImuState, PoseEstimate, StereoExtrinsics,
                    StereoFrame, StereoObservation)

__version__ = "0.1.0"

__all__ = [
    "DsVioConfig",
    "DsVioPipeline",
    "EkfState",
    "FeatureTrack",
    "FrameStats",
    "GyroNoiseParams",
    "GyroState",
    "ImuNoiseParams",
    "ImuSample",
    "ImuState",
    "KeyframePolicy",
    "PoseEstimate",
    "RunConfig",
    "SimConfig",
    "StereoExtrinsics",
    "StereoFrame",
    "StereoObservation",
    "__version__",
]
