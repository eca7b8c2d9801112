"""State containers for the sliding-window stereo filter.

The error-state vector is ordered [dtheta_I, b_g, v, b_a, p] for the IMU
block (15 entries, slices below) followed by one [dtheta_C, p_C] pair per
window pose (6 entries each). Covariances are dense numpy arrays in that
ordering.
"""

from dataclasses import dataclass, field

import numpy as np

from . import quat

# IMU error-state slices.
TH = slice(0, 3)
BG = slice(3, 6)
V = slice(6, 9)
BA = slice(9, 12)
POS = slice(12, 15)
IMU_DIM = 15
POSE_DIM = 6


@dataclass
class ImuState:
    """Nominal IMU state: attitude, gyro bias, velocity, accel bias, position."""

    q: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return ImuState(self.q.copy(), self.b_g.copy(), self.v.copy(),
                        self.b_a.copy(), self.p.copy())


@dataclass
class FrameStats:
    """Frontend statistics used for keyframe selection."""

    mean_parallax: float = 0.0  # pixels, relative to the previous keyframe
    tracked_count: int = 0


@dataclass
class CameraPose:
    """One window entry: left-camera attitude (global to camera) and position."""

    state_id: int
    q: np.ndarray
    p: np.ndarray
    keyframe: bool = False
    frame_stats: FrameStats | None = None

    def copy(self):
        return CameraPose(self.state_id, self.q.copy(), self.p.copy(),
                          self.keyframe, self.frame_stats)


@dataclass
class EkfState:
    """Full second-stage state: IMU block, camera window, error covariance."""

    imu: ImuState = field(default_factory=ImuState)
    window: list = field(default_factory=list)
    P: np.ndarray = field(default_factory=lambda: np.zeros((IMU_DIM, IMU_DIM)))
    next_state_id: int = 0

    @property
    def dim(self):
        return IMU_DIM + POSE_DIM * len(self.window)

    def pose_slice(self, index):
        start = IMU_DIM + POSE_DIM * index
        return slice(start, start + POSE_DIM)

    def copy(self):
        return EkfState(self.imu.copy(), [c.copy() for c in self.window],
                        self.P.copy(), self.next_state_id)


@dataclass
class ImuNoiseParams:
    """Continuous-time IMU noise densities and the world gravity vector."""

    sigma_g: float = 1.7e-4    # gyro white noise [rad/s/sqrt(Hz)]
    sigma_wg: float = 2e-5     # gyro bias random walk [rad/s^2/sqrt(Hz)]
    sigma_a: float = 2e-3      # accel white noise [m/s^2/sqrt(Hz)]
    sigma_wa: float = 3e-3     # accel bias random walk [m/s^3/sqrt(Hz)]
    g_vec: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))


@dataclass
class StereoObservation:
    """Normalized image coordinates (pinhole z=1 plane), left then right."""

    u1: float
    v1: float
    u2: float
    v2: float

    def as_array(self):
        return np.array([self.u1, self.v1, self.u2, self.v2])


@dataclass
class StereoExtrinsics:
    """Camera rig mounting: IMU-to-left-camera and left-to-right transforms.

    q_CI rotates IMU-frame vectors into the left camera frame; p_IC is the
    left camera origin in IMU coordinates. q_RL rotates left-camera vectors
    into the right camera frame; p_LR is the right camera origin in
    left-camera coordinates.
    """

    q_CI: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    p_IC: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_RL: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    p_LR: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.0, 0.0]))

    @property
    def baseline(self):
        return float(np.linalg.norm(self.p_LR))


@dataclass
class FeatureTrack:
    """Stereo observations of one feature, keyed by camera state id."""

    feature_id: int
    obs: dict = field(default_factory=dict)  # state_id -> StereoObservation

    def __len__(self):
        return len(self.obs)


@dataclass
class ImuSample:
    t: float
    w_m: np.ndarray
    a_m: np.ndarray


@dataclass
class StereoFrame:
    t: float
    tracks: list  # list of (feature_id, StereoObservation)
    stats: FrameStats = field(default_factory=FrameStats)


@dataclass
class PoseEstimate:
    """Filter output at one timestamp with 1-sigma error-state diagonals.

    sigmas holds [attitude (3), velocity (3), position (3)].
    """

    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    sigmas: np.ndarray
