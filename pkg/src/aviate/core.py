"""Shared geometric types, frame conventions and stack configuration.

Conventions used everywhere in the package:

* SI units (m, s, rad). Only the CLI accepts degrees.
* Right-handed frames. World is E-XYZ with Z up; body is B-xyz with
  x forward, y left, z up.
* Euler angles are (roll, pitch, yaw) applied Z-Y-X intrinsic, i.e.
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)`` maps body vectors to world.
* Timestamps are float seconds from episode start.

Points are plain ``numpy`` arrays: a single point is shape ``(3,)``, a
cloud is ``(N, 3)``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

FloatArray = NDArray[np.float64]

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration."""


def as_point(value: ArrayLike) -> FloatArray:
    """Return ``value`` as a finite float64 vector of shape (3,)."""
    arr = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite point: {arr}")
    return arr


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"cannot wrap non-finite angle {a}")
    w = a - TWO_PI * math.floor((a + math.pi) / TWO_PI)
    return math.pi if w <= -math.pi else w


def wrap_angles(a: ArrayLike) -> FloatArray:
    """Vectorised :func:`wrap_angle`."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot wrap non-finite angles")
    w = arr - TWO_PI * np.floor((arr + math.pi) / TWO_PI)
    return np.where(w <= -math.pi, math.pi, w)


def euler_to_matrix(e: ArrayLike) -> FloatArray:
    """Rotation matrix (body -> world) for Z-Y-X intrinsic (roll, pitch, yaw)."""
    roll, pitch, yaw = np.asarray(e, dtype=np.float64).reshape(3)
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


class Frame(str, enum.Enum):
    BODY = "body"
    WORLD = "world"


@dataclass(frozen=True)
class PoseState:
    """Drone pose, rates and accelerations at ``timestamp``."""

    p: FloatArray
    e: FloatArray
    v_p: FloatArray = field(default_factory=lambda: np.zeros(3))
    v_e: FloatArray = field(default_factory=lambda: np.zeros(3))
    a_p: FloatArray = field(default_factory=lambda: np.zeros(3))
    a_e: FloatArray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        for name in ("p", "v_p", "v_e", "a_p", "a_e"):
            object.__setattr__(self, name, as_point(getattr(self, name)))
        object.__setattr__(self, "e", wrap_angles(as_point(self.e)))

    @property
    def rotation(self) -> FloatArray:
        return euler_to_matrix(self.e)


def body_to_world(pt: ArrayLike, pose: PoseState) -> FloatArray:
    """Map body-frame point(s) to the world frame.  Accepts (3,) or (N, 3)."""
    pts = np.asarray(pt, dtype=np.float64)
    return pts @ pose.rotation.T + pose.p


def world_to_body(pt: ArrayLike, pose: PoseState) -> FloatArray:
    """Inverse of :func:`body_to_world`."""
    pts = np.asarray(pt, dtype=np.float64)
    return (pts - pose.p) @ pose.rotation


@dataclass(frozen=True)
class PointCloudFrame:
    """Timestamped colored cloud. ``xyz`` is (N, 3) meters, ``rgb`` is (N, 3) in [0, 1]."""

    xyz: FloatArray
    rgb: FloatArray
    timestamp: float
    frame: Frame = Frame.BODY

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
        if len(xyz) != len(rgb):
            raise ValueError("xyz and rgb must have the same length")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "frame", Frame(self.frame))

    def __len__(self) -> int:
        return len(self.xyz)

    def select(self, mask: NDArray[Any]) -> PointCloudFrame:
        return PointCloudFrame(self.xyz[mask], self.rgb[mask], self.timestamp, self.frame)

    @classmethod
    def empty(cls, timestamp: float = 0.0, frame: Frame = Frame.BODY) -> PointCloudFrame:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), timestamp, frame)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole depth camera.  Optical axis is the mount's +x axis."""

    hfov: float = 1.50
    vfov: float = 1.01
    max_range: float = 10.0
    width: int = 424
    height: int = 240
    mount_rotation: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    mount_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not (0 < self.hfov < math.pi and 0 < self.vfov < math.pi):
            raise ConfigError("camera fov must lie in (0, pi)")
        if self.max_range <= 0 or self.width < 1 or self.height < 1:
            raise ConfigError("camera range and resolution must be positive")

    @property
    def mount_R(self) -> FloatArray:
        return np.asarray(self.mount_rotation, dtype=np.float64)

    @property
    def mount_t(self) -> FloatArray:
        return np.asarray(self.mount_translation, dtype=np.float64)


@dataclass(frozen=True)
class TimingModel:
    t_pl: float = 0.02
    t_ct: float = 0.01
    t_pm: float = 0.0
    t_dp: float = 0.0
    dt_n: float = 0.05

    def __post_init__(self) -> None:
        if min(self.t_pl, self.t_ct, self.t_pm, self.t_dp, self.dt_n) < 0:
            raise ConfigError("timing components must be >= 0")


@dataclass(frozen=True)
class FilterConfig:
    max_range: float = 4.0
    voxel: float = 0.2
    outlier_radius: float = 0.3
    # 13 removes nearly every surface point once clouds are 0.2 m voxelised
    min_neighbors: int = 3
    omega_max: float = 1.5
    max_pair_gap: float = 0.03


@dataclass(frozen=True)
class ClassifierConfig:
    d_t: float = 0.2
    d_s: float = 0.1
    d_ecd: float = 1.0
    eps: float = 0.35
    min_pts: int = 4
    static_capacity: int = 5000
    history: float = 1.0
    overlay: bool = False
    overlay_min_pts_factor: float = 6.0
    scale_center: float = 1.0
    scale_count: float = 50.0
    scale_spread: float = 0.05
    scale_volume: float = 0.5
    scale_color_mean: float = 1.0
    scale_color_var: float = 1.0


@dataclass(frozen=True)
class KalmanConfig:
    q_pos: float = 1e-3
    q_vel: float = 1e-3
    r_pos: float = 4e-2
    r_vel: float = 1.0
    p0: float = 10.0

    def matrices(self) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Return (Q, R, P0) as 6x6 arrays."""
        q = np.diag([self.q_pos] * 3 + [self.q_vel] * 3)
        r = np.diag([self.r_pos] * 3 + [self.r_vel] * 3)
        return q, r, np.eye(6) * self.p0


@dataclass(frozen=True)
class TrackerConfig:
    gate: float = 1.0
    stale_after: float = 1.5
    max_speed: float = 10.0
    radius_ema: float = 0.3
    sphere_eps: float = 0.05
    # gates for handing a track to the dynamic planner
    confirm_hits: int = 3
    max_dynamic_radius: float = 1.0
    min_dynamic_speed: float = 0.3


@dataclass(frozen=True)
class PlannerConfig:
    d_use: float = 3.0
    r_safe: float = 0.5
    v_max: float = 3.0
    v_min: float = 0.0
    a_max: float = 4.0
    t_max: float = 1.2
    eta1: float = 6.0
    eta2: float = 20.0
    xi: float = 0.02
    waypoint_dist: float = 0.3
    has_step: float = math.radians(10.0)
    has_max_offset: float = math.pi
    goal_tolerance: float = 0.3


_SECTIONS: dict[str, type] = {
    "filter": FilterConfig,
    "classifier": ClassifierConfig,
    "tracker": TrackerConfig,
    "kalman": KalmanConfig,
    "planner": PlannerConfig,
    "timing": TimingModel,
}


@dataclass(frozen=True)
class StackConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    timing: TimingModel = field(default_factory=TimingModel)

    def __post_init__(self) -> None:
        _validate(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StackConfig:
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name: f for f in dataclasses.fields(section_cls)}
            bad = set(raw) - set(known)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs = {}
            for key, value in raw.items():
                default = getattr(section_cls(), key)
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise ConfigError(f"{name}.{key} must be a boolean")
                elif isinstance(default, (int, float)):
                    if isinstance(value, bool) or not isinstance(value, (int, float)):
                        raise ConfigError(f"{name}.{key} must be a number")
                    value = type(default)(value)
                kwargs[key] = value
            sections[name] = section_cls(**kwargs)
        return cls(**sections)

    @classmethod
    def load(cls, path: str | Path) -> StackConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **sections: Any) -> StackConfig:
        """Return a copy with fields of named sections overridden.

        ``cfg.replace(planner={"v_max": 2.0})``
        """
        updated = {}
        for name, changes in sections.items():
            updated[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **updated)


def _validate(cfg: StackConfig) -> None:
    f, c, k, p, t = cfg.filter, cfg.classifier, cfg.kalman, cfg.planner, cfg.tracker
    positive = {
        "filter.max_range": f.max_range,
        "filter.voxel": f.voxel,
        "filter.outlier_radius": f.outlier_radius,
        "filter.omega_max": f.omega_max,
        "filter.max_pair_gap": f.max_pair_gap,
        "classifier.d_t": c.d_t,
        "classifier.d_s": c.d_s,
        "classifier.d_ecd": c.d_ecd,
        "classifier.eps": c.eps,
        "classifier.history": c.history,
        "kalman.q_pos": k.q_pos,
        "kalman.q_vel": k.q_vel,
        "kalman.r_pos": k.r_pos,
        "kalman.r_vel": k.r_vel,
        "kalman.p0": k.p0,
        "tracker.gate": t.gate,
        "tracker.stale_after": t.stale_after,
        "tracker.max_speed": t.max_speed,
        "tracker.max_dynamic_radius": t.max_dynamic_radius,
        "planner.d_use": p.d_use,
        "planner.r_safe": p.r_safe,
        "planner.v_max": p.v_max,
        "planner.a_max": p.a_max,
        "planner.t_max": p.t_max,
        "planner.xi": p.xi,
        "planner.waypoint_dist": p.waypoint_dist,
        "planner.has_step": p.has_step,
    }
    for name, value in positive.items():
        if not value > 0:
            raise ConfigError(f"{name} must be > 0, got {value}")
    if t.confirm_hits < 1 or t.min_dynamic_speed < 0:
        raise ConfigError("tracker.confirm_hits must be >= 1 and min_dynamic_speed >= 0")
    if f.min_neighbors < 0 or c.min_pts < 1 or c.static_capacity < 1:
        raise ConfigError("neighbor counts and capacities must be positive")
    if not 0 <= p.v_min < p.v_max:
        raise ConfigError("planner requires 0 <= v_min < v_max")
    if p.eta1 < 0 or p.eta2 < 0:
        raise ConfigError("objective weights must be >= 0")
    if not 0 < t.radius_ema <= 1:
        raise ConfigError("tracker.radius_ema must lie in (0, 1]")
