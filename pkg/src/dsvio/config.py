"""Dataclass configs for the filter pipeline, the simulator, and runs.

Configs load from JSON with strict field checking: unknown keys raise
ConfigError naming the offending field.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .gyro_ekf import GyroNoiseParams
from .state import ImuNoiseParams, StereoExtrinsics
from .vision import TriangulationOptions


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class KeyframePolicy:
    parallax_threshold: float = 10.0  # px since the previous keyframe
    min_tracked: int = 40             # keyframe when tracking drops to this
    mode: str = "paper"               # "paper" (keep keyframes) or "fifo"


@dataclass
class InitSigmas:
    """1-sigma values applied to the error state at initialization."""

    theta_rp: float = 0.02   # roll/pitch [rad]
    theta_yaw: float = 1e-3  # yaw is the reference direction at init
    b_g: float = 1e-3        # [rad/s]
    v: float = 1e-3          # [m/s]
    b_a: float = 0.02        # [m/s^2]
    p: float = 1e-6          # position defines the origin


@dataclass
class DsVioConfig:
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    # Stage-1 defaults for in-pipeline use: slow attitude process noise and
    # frozen bias random walk. Gravity updates must not re-learn the gyro
    # bias here; sustained maneuver accelerations would masquerade as bias.
    # The stereo updates own the bias and write it back after each update.
    gyro_noise: GyroNoiseParams = field(default_factory=lambda: GyroNoiseParams(
        sigma_q=1e-6, sigma_b=1e-12, innovation_gate=3.0))
    extrinsics: StereoExtrinsics = field(default_factory=StereoExtrinsics)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    init_sigmas: InitSigmas = field(default_factory=InitSigmas)
    triangulation: TriangulationOptions = field(default_factory=TriangulationOptions)
    window_size: int = 20
    min_track_length: int = 3
    gravity: float = 9.81
    stage1_coupling: str = "orientation_seed"  # "orientation_seed" or "off"
    gating: bool = True
    chi2_confidence: float = 0.95
    sigma_px: float = 1.5
    f_nominal: float = 460.0
    static_init_duration: float = 0.5

    @property
    def sigma_px_normalized(self):
        return self.sigma_px / self.f_nominal

    def validate(self):
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if self.min_track_length < 2:
            raise ConfigError("min_track_length must be >= 2")
        if self.stage1_coupling not in ("orientation_seed", "off"):
            raise ConfigError("stage1_coupling must be 'orientation_seed' or 'off'")
        if self.keyframe.mode not in ("paper", "fifo"):
            raise ConfigError("keyframe.mode must be 'paper' or 'fifo'")
        if not 0.0 < self.chi2_confidence < 1.0:
            raise ConfigError("chi2_confidence must be in (0, 1)")
        return self


@dataclass
class TrajectorySpec:
    kind: str = "figure_eight"  # static | circle | figure_eight | sinusoid_3d
    radius: float = 5.0         # circle / sinusoid_3d [m]
    period: float = 30.0        # seconds per loop
    amplitude: tuple = (8.0, 4.0, 0.8)  # figure-eight axes, vertical osc [m]
    center: tuple = (0.0, 0.0, 1.5)
    ramp: float = 3.0           # smooth start-up time constant [s]
    tilt: tuple = (0.0, 0.0, 0.0)  # static-pose attitude rotvec [rad]
    hover: float = 1.0          # hold the start pose this long [s]


@dataclass
class SimConfig:
    seed: int = 0
    duration: float = 60.0
    imu_hz: float = 200.0
    cam_hz: float = 20.0
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    extrinsics: StereoExtrinsics = field(default_factory=StereoExtrinsics)
    sigma_px: float = 1.5       # pixel noise std [px]
    f_nominal: float = 460.0
    fov_deg: float = 100.0
    max_tracked: int = 60
    num_landmarks: int = 600
    shell_inner: float = 3.0    # landmark shell around the path [m]
    shell_outer: float = 12.0
    min_depth: float = 0.3      # visibility depth bounds [m]
    max_depth: float = 60.0
    gyro_bias0: tuple = (0.0, 0.0, 0.0)
    accel_bias0: tuple = (0.0, 0.0, 0.0)
    parallax_threshold: float = 10.0  # sim-side keyframe reference for stats
    min_tracked_stat: int = 40
    # Periodic tracking outages (texture-poor stretches): within every
    # dropout_period seconds the last dropout_fraction of it has no tracks.
    dropout_period: float = 0.0
    dropout_fraction: float = 0.0
    # Single outage window [start, start + duration), seconds.
    dropout_start: float = 0.0
    dropout_duration: float = 0.0

    @property
    def sigma_px_normalized(self):
        return self.sigma_px / self.f_nominal

    def validate(self):
        if not self.cam_hz > 0:
            raise ConfigError("cam_hz must be positive")
        if self.imu_hz < self.cam_hz:
            raise ConfigError("imu_hz must be >= cam_hz")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        kinds = ("static", "circle", "figure_eight", "sinusoid_3d")
        if self.trajectory.kind not in kinds:
            raise ConfigError("trajectory.kind must be one of %s" % (kinds,))
        return self


@dataclass
class RunConfig:
    filter: DsVioConfig = field(default_factory=DsVioConfig)
    init: str = "static"  # "static" or "groundtruth"
    sim: SimConfig | None = None  # enables --runs Monte-Carlo regeneration

    def validate(self):
        self.filter.validate()
        if self.init not in ("static", "groundtruth"):
            raise ConfigError("init must be 'static' or 'groundtruth'")
        if self.sim is not None:
            self.sim.validate()
        return self


def from_mapping(cls, data, ctx=""):
    """Build a config dataclass from a plain dict, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError("expected an object for '%s'" % (ctx.rstrip(".") or cls.__name__))
    default = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError("unknown field '%s%s'" % (ctx, key))
        current = getattr(default, key)
        if dataclasses.is_dataclass(current) and not isinstance(current, type):
            kwargs[key] = from_mapping(type(current), value, ctx + key + ".")
        elif isinstance(current, np.ndarray):
            kwargs[key] = np.asarray(value, dtype=float)
        elif isinstance(current, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return dataclasses.replace(default, **kwargs)


def _special(cls, data, ctx):
    # RunConfig.sim is optional and has no default instance to inspect.
    if cls is RunConfig and data and "sim" in data:
        data = dict(data)
        sim = data.pop("sim")
        cfg = from_mapping(RunConfig, data, ctx)
        cfg.sim = from_mapping(SimConfig, sim, ctx + "sim.") if sim is not None else None
        return cfg
    return from_mapping(cls, data, ctx)


def load_config(path, cls):
    """Load and validate a JSON config file into the given dataclass."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e))
    except json.JSONDecodeError as e:
        raise ConfigError("invalid JSON in %s: %s" % (path, e))
    cfg = _special(cls, data, "")
    return cfg.validate()


def to_jsonable(obj):
    """Recursively convert dataclasses/arrays into JSON-serializable values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return [float(x) for x in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    return obj
