"""Deterministic scene simulator: ray-cast depth camera, scripted actors, point-mass drone.

Scenes are JSON documents (see ``scenes/*.json`` for the builtin ones).  An
episode couples the simulator with the full stack

    raw cloud -> filters -> classifier -> tracker -> planner -> drone

either in lockstep (single thread, modeled latencies, bit-reproducible) or
in realtime (one worker thread per stage, measured latencies).
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import math
import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .classifier import ObstacleClassifier
from .core import (
    CameraModel,
    ConfigError,
    FloatArray,
    Frame,
    PointCloudFrame,
    PoseState,
    StackConfig,
    as_point,
    euler_to_matrix,
    wrap_angle,
)
from .perception import FrameRejected, MessageBuffer, process_frame
from .planner import PlannerState, PlanStep, plan_step
from .tracker import Detection, TrackSnapshot, Tracker, is_moving

PHYSICS_DT = 1.0 / 300.0
POSE_RATE = 100.0
CAMERA_RATE = 30.0


class SceneError(ConfigError):
    """Malformed scene document."""


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Sphere:
    center: FloatArray
    radius: float
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def distance(self, p: FloatArray) -> float:
        return float(np.linalg.norm(p - self.center)) - self.radius


@dataclass(frozen=True)
class Box:
    lo: FloatArray
    hi: FloatArray
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def distance(self, p: FloatArray) -> float:
        """Signed distance (negative inside)."""
        q = np.maximum(self.lo - p, p - self.hi)
        outside = float(np.linalg.norm(np.maximum(q, 0.0)))
        return outside + min(float(q.max()), 0.0)


Primitive = Sphere | Box


def ray_sphere(origin: FloatArray, dirs: FloatArray, center: FloatArray, radius: float) -> FloatArray:
    """Distance to the first hit along unit ``dirs`` (inf on miss or when inside)."""
    oc = origin - center
    b = dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    out = np.full(len(dirs), np.inf)
    if c <= 0:
        return out
    hit = disc >= 0
    t = -b[hit] - np.sqrt(disc[hit])
    t[t <= 0] = np.inf
    out[hit] = t
    return out


def ray_box(origin: FloatArray, dirs: FloatArray, lo: FloatArray, hi: FloatArray) -> FloatArray:
    """Slab test; distance to the entry point (inf on miss or when inside)."""
    if np.all(origin >= lo) and np.all(origin <= hi):
        return np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


@functools.lru_cache(maxsize=16)
def camera_rays(cam: CameraModel) -> FloatArray:
    """Unit pixel rays in the camera frame (x forward, y left, z up), row-major."""
    u = (np.arange(cam.width) + 0.5) / cam.width * 2.0 - 1.0
    v = (np.arange(cam.height) + 0.5) / cam.height * 2.0 - 1.0
    yy = -u * math.tan(cam.hfov / 2)
    zz = -v * math.tan(cam.vfov / 2)
    Y, Z = np.meshgrid(yy, zz)
    d = np.column_stack([np.ones(Y.size), Y.ravel(), Z.ravel()])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d.setflags(write=False)
    return d


def cast(origin: FloatArray, dirs: FloatArray, prims: list[Primitive]) -> tuple[FloatArray, np.ndarray]:
    """Nearest hit distance and primitive index per ray (-1 on miss)."""
    best = np.full(len(dirs), np.inf)
    idx = np.full(len(dirs), -1)
    for k, prim in enumerate(prims):
        if isinstance(prim, Sphere):
            d = ray_sphere(origin, dirs, prim.center, prim.radius)
        else:
            d = ray_box(origin, dirs, prim.lo, prim.hi)
        closer = d < best
        best[closer] = d[closer]
        idx[closer] = k
    return best, idx


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Actor:
    """Moving obstacle on a piecewise-linear position script.

    ``kind`` is ``"sphere"`` (rigid ball) or ``"walker"``: a torso sphere
    with two legs hanging from the hips, each a chain of ``limb_segments``
    small spheres swinging like a pendulum along the walking direction.
    The scripted position is the torso center.
    """

    name: str
    kind: str
    radius: float
    times: FloatArray
    positions: FloatArray
    color: tuple[float, float, float] = (0.8, 0.2, 0.2)
    limb_radius: float = 0.07
    limb_length: float = 0.8
    limb_segments: int = 3
    limb_spread: float = 0.12
    gait_amplitude: float = 0.5  # rad
    gait_freq: float = 1.0
    limb_color: tuple[float, float, float] = (0.2, 0.2, 0.6)

    def position(self, t: float) -> FloatArray:
        return np.array([np.interp(t, self.times, self.positions[:, k]) for k in range(3)])

    def velocity(self, t: float) -> FloatArray:
        if len(self.times) < 2 or t < self.times[0] or t >= self.times[-1]:
            return np.zeros(3)
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        dt = self.times[i + 1] - self.times[i]
        return (self.positions[i + 1] - self.positions[i]) / dt

    def primitives(self, t: float) -> list[Sphere]:
        c = self.position(t)
        torso = Sphere(c, self.radius, self.color)
        if self.kind == "sphere":
            return [torso]
        v = self.velocity(t)
        h = np.array([v[0], v[1], 0.0])
        nh = float(np.linalg.norm(h))
        fwd = h / nh if nh > 1e-9 else np.array([1.0, 0.0, 0.0])
        side = np.array([-fwd[1], fwd[0], 0.0])
        phase = self.gait_amplitude * math.sin(2 * math.pi * self.gait_freq * t) if nh > 1e-9 else 0.0
        hip = c - np.array([0.0, 0.0, 0.8 * self.radius])
        out = [torso]
        for sgn in (1.0, -1.0):
            ang = sgn * phase
            axis = math.sin(ang) * fwd - math.cos(ang) * np.array([0.0, 0.0, 1.0])
            root = hip + sgn * self.limb_spread * side
            for k in range(self.limb_segments):
                d = (k + 1) / self.limb_segments * self.limb_length
                out.append(Sphere(root + d * axis, self.limb_radius, self.limb_color))
        return out


@dataclass(frozen=True)
class DroneSpec:
    mode: str = "planner"  # or "hover"
    radius: float = 0.15
    yaw: float | None = None
    hover_center: tuple[float, float, float] | None = None
    hover_radius: float = 1.0
    yaw_tau: float = 0.3
    yaw_rate_max: float = 1.2


@dataclass(frozen=True)
class Scene:
    name: str
    duration: float
    seed: int
    start: FloatArray
    goal: FloatArray
    static: tuple[Primitive, ...] = ()
    actors: tuple[Actor, ...] = ()
    camera: CameraModel = field(default_factory=CameraModel)
    sigma: float = 0.0
    rel_sigma: float = 0.01
    drone: DroneSpec = field(default_factory=DroneSpec)
    config: dict[str, Any] = field(default_factory=dict)

    def primitives(self, t: float) -> list[Primitive]:
        prims: list[Primitive] = list(self.static)
        for actor in self.actors:
            prims.extend(actor.primitives(t))
        return prims

    def clearance(self, p: FloatArray, t: float) -> float:
        """Distance from the drone body (sphere of ``drone.radius``) to the nearest surface."""
        prims = self.primitives(t)
        if not prims:
            return math.inf
        return min(prim.distance(p) for prim in prims) - self.drone.radius

    def stack_config(self, base: StackConfig | None = None) -> StackConfig:
        cfg = base or StackConfig()
        if self.config:
            merged = cfg.to_dict()
            for sec, vals in self.config.items():
                if sec not in merged or not isinstance(vals, dict):
                    raise SceneError(f"scene config: unknown section {sec!r}")
                merged[sec].update(vals)
            cfg = StackConfig.from_dict(merged)
        return cfg

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Scene:
        try:
            return _parse_scene(data)
        except SceneError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"malformed scene: {type(exc).__name__}: {exc}") from exc

    @classmethod
    def load(cls, source: str | Path) -> Scene:
        """Load a scene from a path or a builtin name (``corridor``, ``crossing``, ...)."""
        path = Path(source)
        if not path.exists() and path.suffix == "":
            try:
                text = resources.files("aviate.scenes").joinpath(f"{source}.json").read_text()
            except FileNotFoundError as exc:
                raise SceneError(f"no scene file or builtin named {source!r}") from exc
        else:
            try:
                text = path.read_text()
            except OSError as exc:
                raise SceneError(f"cannot read scene {source}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)


def builtin_scenes() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("aviate.scenes").iterdir() if p.name.endswith(".json"))


def _color(value: Any) -> tuple[float, float, float]:
    c = tuple(float(x) for x in value)
    if len(c) != 3 or not all(0.0 <= x <= 1.0 for x in c):
        raise SceneError(f"colors are three numbers in [0, 1], got {value}")
    return c  # type: ignore[return-value]


def _parse_primitive(d: dict[str, Any]) -> Primitive:
    kind = d["type"]
    color = _color(d.get("color", (0.5, 0.5, 0.5)))
    if kind == "sphere":
        r = float(d["radius"])
        if r <= 0:
            raise SceneError("sphere radius must be > 0")
        return Sphere(as_point(d["center"]), r, color)
    if kind == "box":
        lo, hi = as_point(d["min"]), as_point(d["max"])
        if np.any(hi <= lo):
            raise SceneError(f"box extents must be positive: {d}")
        return Box(lo, hi, color)
    raise SceneError(f"unknown primitive type {kind!r}")


def _parse_actor(d: dict[str, Any]) -> Actor:
    keys = np.asarray(d["keyframes"], dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != 4 or len(keys) < 1:
        raise SceneError(f"actor {d.get('name')!r}: keyframes are [t, x, y, z] rows")
    if np.any(np.diff(keys[:, 0]) <= 0):
        raise SceneError(f"actor {d.get('name')!r}: keyframe times must increase")
    kind = d.get("kind", "sphere")
    if kind not in ("sphere", "walker"):
        raise SceneError(f"unknown actor kind {kind!r}")
    extra: dict[str, Any] = {
        k: float(d[k]) for k in ("limb_radius", "limb_length", "limb_spread", "gait_amplitude", "gait_freq") if k in d
    }
    if "limb_segments" in d:
        extra["limb_segments"] = int(d["limb_segments"])
    actor = Actor(
        name=str(d["name"]),
        kind=kind,
        radius=float(d["radius"]),
        times=keys[:, 0].copy(),
        positions=keys[:, 1:].copy(),
        color=_color(d.get("color", (0.8, 0.2, 0.2))),
        limb_color=_color(d.get("limb_color", (0.2, 0.2, 0.6))),
        **extra,
    )
    if actor.radius <= 0 or actor.limb_radius <= 0 or actor.limb_segments < 1:
        raise SceneError("actor radii must be > 0")
    return actor


def _parse_scene(d: dict[str, Any]) -> Scene:
    if not isinstance(d, dict):
        raise SceneError("scene document must be a JSON object")
    allowed = {"name", "duration", "seed", "start", "goal", "static", "actors", "camera", "drone", "config"}
    unknown = set(d) - allowed
    if unknown:
        raise SceneError(f"unknown scene keys: {sorted(unknown)}")
    cam = dict(d.get("camera", {}))
    sigma = float(cam.pop("sigma", 0.0))
    rel_sigma = float(cam.pop("rel_sigma", 0.01))
    if sigma < 0 or rel_sigma < 0:
        raise SceneError("noise levels must be >= 0")
    drone = dict(d.get("drone", {}))
    if "hover_center" in drone:
        drone["hover_center"] = tuple(float(x) for x in drone["hover_center"])
    spec = DroneSpec(**drone)
    if spec.mode not in ("planner", "hover"):
        raise SceneError(f"unknown drone mode {spec.mode!r}")
    if spec.mode == "hover" and spec.hover_center is None:
        raise SceneError("hover mode needs hover_center")
    duration = float(d["duration"])
    if duration <= 0:
        raise SceneError("duration must be > 0")
    config = d.get("config", {})
    if not isinstance(config, dict):
        raise SceneError("config must be an object")
    scene = Scene(
        name=str(d.get("name", "scene")),
        duration=duration,
        seed=int(d.get("seed", 0)),
        start=as_point(d["start"]),
        goal=as_point(d.get("goal", d["start"])),
        static=tuple(_parse_primitive(p) for p in d.get("static", [])),
        actors=tuple(_parse_actor(a) for a in d.get("actors", [])),
        camera=CameraModel(**cam),
        sigma=sigma,
        rel_sigma=rel_sigma,
        drone=spec,
        config=config,
    )
    scene.stack_config()  # validate overrides early
    return scene


# ---------------------------------------------------------------------------
# sensor


def render_cloud(
    scene: Scene,
    pose: PoseState,
    cam: CameraModel | None = None,
    sigma: float = 0.0,
    seed: int | np.random.Generator = 0,
    rel_sigma: float = 0.0,
    t: float | None = None,
) -> PointCloudFrame:
    """Ray-cast one depth frame from ``pose``; the cloud is in the body frame.

    Range noise is Gaussian with standard deviation ``sigma + rel_sigma*range``.
    Actors are placed at time ``t`` (default: the pose stamp).
    """
    if sigma < 0 or rel_sigma < 0:
        raise ValueError("noise levels must be >= 0")
    cam = cam or scene.camera
    t = pose.timestamp if t is None else t
    prims = scene.primitives(t)
    if not prims:
        return PointCloudFrame.empty(t, Frame.BODY)
    rays_body = camera_rays(cam) @ cam.mount_R.T
    R = pose.rotation
    origin = pose.p + R @ cam.mount_t
    dist, idx = cast(origin, rays_body @ R.T, prims)
    hit = dist <= cam.max_range
    r = dist[hit]
    if sigma > 0 or rel_sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        r = r + rng.normal(size=len(r)) * (sigma + rel_sigma * r)
    xyz = cam.mount_t + rays_body[hit] * r[:, None]
    colors = np.array([p.color for p in prims])
    return PointCloudFrame(xyz, colors[idx[hit]], t, Frame.BODY)


# ---------------------------------------------------------------------------
# drone


@dataclass(frozen=True)
class DroneState:
    t: float
    p: FloatArray
    v: FloatArray
    a: FloatArray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    yaw_rate: float = 0.0

    def pose(self) -> PoseState:
        return PoseState(
            p=self.p,
            e=np.array([0.0, 0.0, self.yaw]),
            v_p=self.v,
            v_e=np.array([0.0, 0.0, self.yaw_rate]),
            a_p=self.a,
            timestamp=self.t,
        )


def step_drone(state: DroneState, a_cmd: FloatArray, dt: float, a_max: float = 4.0) -> DroneState:
    """Exact constant-acceleration step; the command is clamped to ``a_max``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    a = as_point(a_cmd)
    na = float(np.linalg.norm(a))
    if na > a_max:
        a = a * (a_max / na)
    p = state.p + state.v * dt + 0.5 * a * dt * dt
    v = state.v + a * dt
    return dataclasses.replace(state, t=state.t + dt, p=p, v=v, a=a)


def _steer_yaw(state: DroneState, spec: DroneSpec, dt: float) -> DroneState:
    h = math.hypot(state.v[0], state.v[1])
    if h < 0.3:
        rate = 0.0
    else:
        err = wrap_angle(math.atan2(state.v[1], state.v[0]) - state.yaw)
        rate = max(-spec.yaw_rate_max, min(spec.yaw_rate_max, err / spec.yaw_tau))
    return dataclasses.replace(state, yaw=wrap_angle(state.yaw + rate * dt), yaw_rate=rate)


class CommandQueue:
    """Acceleration commands that take effect ``delay`` after issue."""

    def __init__(self, delay: float) -> None:
        self.delay = delay
        self._pending: deque[tuple[float, FloatArray]] = deque()
        self.current = np.zeros(3)

    def push(self, t_issue: float, a: FloatArray) -> None:
        self._pending.append((t_issue + self.delay, np.asarray(a, dtype=np.float64)))

    def at(self, t: float) -> FloatArray:
        while self._pending and self._pending[0][0] <= t + 1e-12:
            self.current = self._pending.popleft()[1]
        return self.current


def hover_path(spec: DroneSpec, t: float) -> tuple[FloatArray, FloatArray]:
    """Scripted wander inside a ball of ``hover_radius`` around the hover center."""
    c = np.asarray(spec.hover_center, dtype=np.float64)
    r = spec.hover_radius
    w = np.array([0.4, 0.55, 0.3])
    ph = np.array([0.0, 1.0, 0.5])
    amp = r * np.array([0.5, 0.6, 0.3])  # norm < r
    p = c + amp * np.sin(w * t + ph)
    v = amp * w * np.cos(w * t + ph)
    return p, v


# ---------------------------------------------------------------------------
# stack


@dataclass
class StageTimes:
    perception: float = 0.0
    classifier: float = 0.0
    tracker: float = 0.0


class Stack:
    """Perception, classification, tracking and planning wired together."""

    def __init__(self, cfg: StackConfig, camera: CameraModel, goal: FloatArray, static_only: bool = False) -> None:
        self.cfg = cfg
        self.buffer = MessageBuffer(cfg.filter.max_pair_gap)
        self.classifier = ObstacleClassifier(cfg, camera)
        self.tracker = Tracker.from_config(cfg)
        self.goal = as_point(goal)
        self.static_only = static_only
        self.static_points = np.zeros((0, 3))
        self.extra_points = np.zeros((0, 3))
        self.tracks: list[TrackSnapshot] = []
        self.all_tracks: list[TrackSnapshot] = []
        self.detections: list[Detection] = []
        self.rejected = 0
        self.periods: deque[float] = deque(maxlen=10)
        self.last_plan_t: float | None = None

    def perceive(self, cloud: PointCloudFrame, pose: PoseState) -> tuple[dict[str, Any] | None, StageTimes]:
        times = StageTimes()
        t0 = time.perf_counter()
        try:
            frame = process_frame(cloud, pose, self.cfg.filter)
        except FrameRejected:
            self.rejected += 1
            return None, times
        t1 = time.perf_counter()
        self.classifier.push(frame)
        out = self.classifier.step()
        t2 = time.perf_counter()
        debug = None
        if out is not None:
            self.static_points = out.static_points
            self.detections = out.detections
            tracks = self.tracker.step(out.t2, out.detections)
            moving = {trk.track_id for trk in tracks if is_moving(trk, self.cfg.tracker)}
            self.tracks = [trk for trk in tracks if trk.track_id in moving]
            self.all_tracks = tracks
            # clusters not trusted as moving are planned around like static ones
            held = [d.points for d, tid in zip(out.detections, self.tracker.assignment)
                    if self.static_only or tid not in moving]
            self.extra_points = np.vstack(held) if held else np.zeros((0, 3))
            debug = out.debug
        t3 = time.perf_counter()
        times.perception, times.classifier, times.tracker = t1 - t0, t2 - t1, t3 - t2
        return debug, times

    def plan(self, pose: PoseState) -> PlanStep:
        if self.last_plan_t is not None and pose.timestamp > self.last_plan_t:
            self.periods.append(pose.timestamp - self.last_plan_t)
        self.last_plan_t = pose.timestamp
        dt_n = float(np.mean(self.periods)) if self.periods else self.cfg.timing.dt_n
        state = PlannerState(pose.p, pose.v_p, pose.a_p, self.goal, pose.timestamp, dt_n)
        points = self.static_points
        if len(self.extra_points):
            points = np.vstack([points, self.extra_points])
        return plan_step(state, points, [] if self.static_only else self.tracks, self.cfg, self.static_only)


# ---------------------------------------------------------------------------
# episode log


TRUTH_COLUMNS = ["t", "px", "py", "pz", "vx", "vy", "vz", "yaw", "clearance"]
ACTOR_COLUMNS = ["t", "actor", "x", "y", "z", "vx", "vy", "vz"]
TRACK_COLUMNS = [
    "t", "track_id", "cx", "cy", "cz", "vx", "vy", "vz", "radius", "observed", "hits", "moving",
    "actor", "err_pos", "err_vel",
]
DETECTION_COLUMNS = [
    "t1", "t2", "cx", "cy", "cz", "raw_vx", "raw_vy", "raw_vz", "radius", "n_points",
    "actor", "err_pos", "err_vel_raw",
]
PLAN_COLUMNS = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "azimuth", "elevation", "v_g", "dynamic",
    "ax", "ay", "az", "t_np", "regime", "candidates", "n_static", "n_tracks",
    "lat_perception_us", "lat_classifier_us", "lat_tracker_us",
    "lat_static_us", "lat_alg2_us", "lat_solve_us", "lat_plan_us",
]
LATENCY_COLUMNS = {c for c in PLAN_COLUMNS if c.startswith("lat_")}
ESTIMATION_WARMUP = 0.5
MATCH_RADIUS = 1.0


@dataclass
class EpisodeLog:
    scene: str
    seed: int
    mode: str
    static_only: bool
    config: dict[str, Any]
    truth: list[list[Any]] = field(default_factory=list)
    actors: list[list[Any]] = field(default_factory=list)
    tracks: list[list[Any]] = field(default_factory=list)
    detections: list[list[Any]] = field(default_factory=list)
    plans: list[list[Any]] = field(default_factory=list)
    debug: list[dict[str, Any]] = field(default_factory=list)
    collision: bool = False
    collision_time: float | None = None
    reached: bool = False
    goal_time: float | None = None
    aborted: str | None = None
    duration: float = 0.0
    min_clearance: float = math.inf
    path_length: float = 0.0
    frames: int = 0
    rejected_frames: int = 0
    stop_plans: int = 0
    velocity_jumps: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def latency_stats(self) -> dict[str, dict[str, float]]:
        out = {}
        for col in PLAN_COLUMNS:
            if col in LATENCY_COLUMNS:
                k = PLAN_COLUMNS.index(col)
                vals = np.array([row[k] for row in self.plans], dtype=np.float64)
                out[col[4:-3]] = {
                    "mean_us": float(vals.mean()) if len(vals) else 0.0,
                    "max_us": float(vals.max()) if len(vals) else 0.0,
                }
        return out

    def _samples(self, actors: list[str] | None = None) -> dict[str, dict[str, list[float]]]:
        """Error samples per actor used by the estimation metrics.

        Filtered samples: for every timestamp and actor the observed track
        closest to the actor.  Samples within ``ESTIMATION_WARMUP`` seconds of
        the track's first appearance, or of a scripted velocity jump of the
        actor, are skipped; the jump rule applies to raw detections too.
        """
        sel = set(actors) if actors is not None else None
        ti = {c: TRACK_COLUMNS.index(c) for c in TRACK_COLUMNS}
        di = {c: DETECTION_COLUMNS.index(c) for c in DETECTION_COLUMNS}
        jumps = self.velocity_jumps

        def settled(name: str, t: float) -> bool:
            return all(not 0.0 <= t - tj < ESTIMATION_WARMUP for tj in jumps.get(name, ()))

        first_seen: dict[int, float] = {}
        best: dict[tuple[float, str], tuple[float, float]] = {}
        for row in self.tracks:
            tid, t, name = row[ti["track_id"]], row[ti["t"]], row[ti["actor"]]
            first_seen.setdefault(tid, t)
            if name == "" or (sel is not None and name not in sel) or not row[ti["observed"]]:
                continue
            if t - first_seen[tid] < ESTIMATION_WARMUP or not settled(name, t):
                continue
            key = (t, name)
            cand = (row[ti["err_pos"]], row[ti["err_vel"]])
            if key not in best or cand[0] < best[key][0]:
                best[key] = cand
        acc: dict[str, dict[str, list[float]]] = {}

        def bucket(name: str) -> dict[str, list[float]]:
            return acc.setdefault(name, {"pos": [], "vel": [], "raw_pos": [], "raw_vel": []})

        for (_, name), (ep, ev) in sorted(best.items()):
            bucket(name)["pos"].append(ep)
            bucket(name)["vel"].append(ev)
        for row in self.detections:
            name = row[di["actor"]]
            if name == "" or (sel is not None and name not in sel):
                continue
            if not settled(name, row[di["t2"]]) or not settled(name, row[di["t1"]]):
                continue
            bucket(name)["raw_pos"].append(row[di["err_pos"]])
            bucket(name)["raw_vel"].append(row[di["err_vel_raw"]])
        return acc

    def estimation(self) -> dict[str, dict[str, float]]:
        """Per-actor RMSE of raw and filtered estimates against ground truth."""
        report = {}
        for name, b in sorted(self._samples().items()):
            report[name] = _rmse_report(b)
        return report

    def pooled_estimation(self, actors: list[str] | None = None) -> dict[str, float]:
        """RMSE pooled over every sample of the named (default: all) actors."""
        pooled: dict[str, list[float]] = {"pos": [], "vel": [], "raw_pos": [], "raw_vel": []}
        for b in self._samples(actors).values():
            for k, v in b.items():
                pooled[k].extend(v)
        return _rmse_report(pooled)

    def fingerprint(self) -> str:
        """SHA-256 over every logged value except wall-clock latencies."""
        h = hashlib.sha256()
        keep = [k for k, c in enumerate(PLAN_COLUMNS) if c not in LATENCY_COLUMNS]
        for name, rows in (("truth", self.truth), ("actors", self.actors), ("tracks", self.tracks),
                           ("detections", self.detections)):
            h.update(name.encode())
            for row in rows:
                h.update(repr(row).encode())
        h.update(b"plans")
        for row in self.plans:
            h.update(repr([row[k] for k in keep]).encode())
        h.update(b"debug")
        for rec in self.debug:
            h.update(json.dumps(rec, sort_keys=True).encode())
        return h.hexdigest()

    def summary(self) -> dict[str, Any]:
        return {
            "scene": self.scene,
            "seed": self.seed,
            "mode": self.mode,
            "baseline": self.static_only,
            "collisions": int(self.collision),
            "collision_time": self.collision_time,
            "reached_goal": self.reached,
            "goal_time": self.goal_time,
            "aborted": self.aborted,
            "duration": self.duration,
            "min_clearance": None if math.isinf(self.min_clearance) else self.min_clearance,
            "path_length": self.path_length,
            "frames": self.frames,
            "rejected_frames": self.rejected_frames,
            "plans": len(self.plans),
            "stop_plans": self.stop_plans,
            "latency": self.latency_stats(),
            "estimation": _json_safe(self.estimation()),
            "fingerprint": self.fingerprint(),
            "config": self.config,
        }

    def write(self, out_dir: str | Path) -> dict[str, Any]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, cols, rows in (
            ("truth.csv", TRUTH_COLUMNS, self.truth),
            ("actors.csv", ACTOR_COLUMNS, self.actors),
            ("tracks.csv", TRACK_COLUMNS, self.tracks),
            ("detections.csv", DETECTION_COLUMNS, self.detections),
            ("plans.csv", PLAN_COLUMNS, self.plans),
        ):
            with open(out / name, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                w.writerows(rows)
        with open(out / "classifier.jsonl", "w") as fh:
            for rec in self.debug:
                fh.write(json.dumps(rec) + "\n")
        summary = self.summary()
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        return summary


def _rmse(v: list[float]) -> float:
    return float(np.sqrt(np.mean(np.square(v)))) if v else math.nan


def _rmse_report(b: dict[str, list[float]]) -> dict[str, float]:
    raw_v, filt_v = _rmse(b["raw_vel"]), _rmse(b["vel"])
    return {
        "samples": len(b["vel"]),
        "raw_samples": len(b["raw_vel"]),
        "position_rmse": _rmse(b["pos"]),
        "raw_position_rmse": _rmse(b["raw_pos"]),
        "raw_velocity_rmse": raw_v,
        "velocity_rmse": filt_v,
        "velocity_ratio": filt_v / raw_v if raw_v > 0 else math.nan,
    }


def _json_safe(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _r(x: float) -> float:
    return round(float(x), 6)


def _nearest_actor(scene: Scene, c: FloatArray, t: float) -> tuple[str, FloatArray, FloatArray]:
    best = ("", np.zeros(3), np.zeros(3))
    best_d = MATCH_RADIUS
    for actor in scene.actors:
        pos = actor.position(t)
        d = float(np.linalg.norm(pos - c))
        if d <= best_d:
            best_d = d
            best = (actor.name, pos, actor.velocity(t))
    return best


class _Recorder:
    def __init__(self, scene: Scene, log: EpisodeLog) -> None:
        self.scene = scene
        self.log = log

    def truth(self, s: DroneState, clearance: float) -> None:
        self.log.truth.append([_r(s.t), *map(_r, s.p), *map(_r, s.v), _r(s.yaw), _r(min(clearance, 1e6))])
        for actor in self.scene.actors:
            self.log.actors.append([_r(s.t), actor.name, *map(_r, actor.position(s.t)), *map(_r, actor.velocity(s.t))])

    def perception(self, stack: Stack, t_frame: float, fresh: bool) -> None:
        if not fresh:
            return
        for det in stack.detections:
            name, pos, vel = _nearest_actor(self.scene, det.center, det.t2)
            err_p = float(np.linalg.norm(det.center - pos)) if name else math.nan
            err_v = float(np.linalg.norm(det.velocity - vel)) if name else math.nan
            self.log.detections.append([
                _r(det.t1), _r(det.t2), *map(_r, det.center), *map(_r, det.velocity), _r(det.radius),
                len(det.points), name, _r(err_p) if name else "", _r(err_v) if name else "",
            ])
        moving = {trk.track_id for trk in stack.tracks}
        for trk in stack.all_tracks:
            name, pos, vel = _nearest_actor(self.scene, trk.center, trk.timestamp)
            err_p = float(np.linalg.norm(trk.center - pos)) if name else math.nan
            err_v = float(np.linalg.norm(trk.velocity - vel)) if name else math.nan
            self.log.tracks.append([
                _r(trk.timestamp), trk.track_id, *map(_r, trk.center), *map(_r, trk.velocity), _r(trk.radius),
                int(trk.observed), trk.hits, int(trk.track_id in moving), name,
                _r(err_p) if name else "", _r(err_v) if name else "",
            ])

    def plan(self, step: PlanStep, stack: Stack, stage: StageTimes) -> None:
        prim = step.primitive
        lat = step.latency_us
        self.log.plans.append([
            _r(step.timestamp), *map(_r, step.p_n), *map(_r, step.v_n), _r(step.azimuth), _r(step.elevation),
            _r(step.v_g), int(step.dynamic), *map(_r, prim.a), _r(prim.t), prim.regime, step.candidates,
            len(stack.static_points), len(stack.tracks),
            round(stage.perception * 1e6, 1), round(stage.classifier * 1e6, 1), round(stage.tracker * 1e6, 1),
            round(lat.get("static", 0.0), 1), round(lat.get("alg2", 0.0), 1), round(lat.get("solve", 0.0), 1),
            round(lat.get("total", 0.0), 1),
        ])
        if prim.stop:
            self.log.stop_plans += 1


# ---------------------------------------------------------------------------
# episode drivers


def run_episode(
    scene: Scene,
    cfg: StackConfig | None = None,
    seed: int | None = None,
    *,
    mode: str = "lockstep",
    static_only: bool = False,
    duration: float | None = None,
    record_debug: bool = True,
) -> EpisodeLog:
    """Fly one episode and return its log.  Never raises on in-flight failures."""
    if mode not in ("lockstep", "realtime"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = scene.stack_config(cfg)
    seed = scene.seed if seed is None else seed
    log = EpisodeLog(scene.name, seed, mode, static_only, cfg.to_dict())
    log.velocity_jumps = {a.name: tuple(float(t) for t in a.times) for a in scene.actors}
    try:
        if mode == "lockstep":
            _run_lockstep(scene, cfg, seed, static_only, duration or scene.duration, log, record_debug)
        else:
            _run_realtime(scene, cfg, seed, static_only, duration or scene.duration, log, record_debug)
    except Exception as exc:  # recorded, never propagated
        log.aborted = f"{type(exc).__name__}: {exc}"
    return log


def _initial_state(scene: Scene) -> DroneState:
    spec = scene.drone
    if spec.mode == "hover":
        p, v = hover_path(spec, 0.0)
    else:
        p, v = scene.start.copy(), np.zeros(3)
    if spec.yaw is not None:
        yaw = spec.yaw
    else:
        d = scene.goal - scene.start
        yaw = math.atan2(d[1], d[0]) if math.hypot(d[0], d[1]) > 0 else 0.0
    return DroneState(0.0, p, v, np.zeros(3), yaw, 0.0)


class _Flight:
    """Ground-truth side of an episode: physics, sensors and bookkeeping."""

    def __init__(self, scene: Scene, cfg: StackConfig, seed: int, log: EpisodeLog) -> None:
        self.scene = scene
        self.cfg = cfg
        self.seed = seed
        self.log = log
        self.rec = _Recorder(scene, log)
        self.state = _initial_state(scene)
        self.commands = CommandQueue(cfg.timing.t_ct)
        self.tick = 0
        self.pose_every = round(1.0 / (POSE_RATE * PHYSICS_DT))
        self.camera_every = round(1.0 / (CAMERA_RATE * PHYSICS_DT))
        self.frame_index = 0

    @property
    def hover(self) -> bool:
        return self.scene.drone.mode == "hover"

    def advance(self) -> None:
        t_next = (self.tick + 1) * PHYSICS_DT
        if self.hover:
            p, v = hover_path(self.scene.drone, t_next)
            self.state = dataclasses.replace(self.state, t=t_next, p=p, v=v)
        else:
            a = self.commands.at(self.state.t)
            prev = self.state.p
            self.state = step_drone(self.state, a, PHYSICS_DT, self.cfg.planner.a_max)
            self.state = dataclasses.replace(self.state, t=t_next)
            self.log.path_length += float(np.linalg.norm(self.state.p - prev))
            self.state = _steer_yaw(self.state, self.scene.drone, PHYSICS_DT)
        self.tick += 1

    def check(self) -> bool:
        """Update clearance/goal bookkeeping.  Returns True when the episode ends."""
        s = self.state
        clearance = self.scene.clearance(s.p, s.t)
        self.log.min_clearance = min(self.log.min_clearance, clearance)
        if self.tick % self.pose_every == 0:
            self.rec.truth(s, clearance)
        if clearance <= 0 and not self.log.collision:
            self.log.collision = True
            self.log.collision_time = _r(s.t)
            return True
        if not self.hover and np.linalg.norm(s.p - self.scene.goal) <= self.cfg.planner.goal_tolerance:
            self.log.reached = True
            self.log.goal_time = _r(s.t)
            return True
        return False

    def pose_due(self) -> bool:
        return self.tick % self.pose_every == 0

    def camera_due(self) -> bool:
        return self.tick % self.camera_every == 0

    def render(self) -> PointCloudFrame:
        rng = np.random.default_rng([self.seed, self.frame_index])
        self.frame_index += 1
        self.log.frames += 1
        return render_cloud(self.scene, self.state.pose(), self.scene.camera, self.scene.sigma, rng,
                            self.scene.rel_sigma)


def _run_lockstep(scene, cfg, seed, static_only, duration, log, record_debug) -> None:
    flight = _Flight(scene, cfg, seed, log)
    stack = Stack(cfg, scene.camera, scene.goal, static_only)
    latest_pose = flight.state.pose()
    stack.buffer.push_pose(latest_pose)
    n_ticks = int(round(duration / PHYSICS_DT))
    pending: list[PointCloudFrame] = []
    while flight.tick < n_ticks:
        if flight.pose_due():
            latest_pose = flight.state.pose()
            if flight.tick:
                stack.buffer.push_pose(latest_pose)
        if flight.camera_due():
            pending.append(flight.render())
        if pending:
            for cloud in pending:
                stack.buffer.push_cloud(cloud)
            pending.clear()
            for cloud, pose in stack.buffer.pop_pairs():
                debug, stage = stack.perceive(cloud, pose)
                flight.rec.perception(stack, cloud.timestamp, debug is not None)
                if debug is not None and record_debug:
                    log.debug.append(debug)
                if not flight.hover:
                    step = stack.plan(latest_pose)
                    flight.rec.plan(step, stack, stage)
                    # modeled processing time before the command leaves the planner
                    flight.commands.push(cloud.timestamp + cfg.timing.t_pl, step.primitive.a)
        flight.advance()
        if flight.check():
            break
    log.duration = _r(flight.state.t)
    log.rejected_frames = stack.rejected


def _worker_count() -> int:
    raw = os.environ.get("AVIATE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 3
    return max(1, min(3, n))


def _run_realtime(scene, cfg, seed, static_only, duration, log, record_debug) -> None:
    """Wall-clock paced run with the stack stages on worker threads.

    The simulator thread renders and integrates; perception (+classifier and
    tracker) and planning run on their own workers and exchange immutable
    snapshots.  With ``AVIATE_THREADS=1`` both stages share one worker.
    """
    flight = _Flight(scene, cfg, seed, log)
    stack = Stack(cfg, scene.camera, scene.goal, static_only)
    lock = threading.Lock()
    clouds: queue.Queue[PointCloudFrame | None] = queue.Queue()
    plan_trigger: queue.Queue[tuple[PoseState, StageTimes] | None] = queue.Queue(maxsize=1)
    state_box: dict[str, Any] = {"pose": flight.state.pose(), "clock": 0.0}
    t_wall0 = time.perf_counter()
    shared = _worker_count() == 1

    def sim_time() -> float:
        return time.perf_counter() - t_wall0

    def do_plan(stage: StageTimes) -> None:
        with lock:
            pose = state_box["pose"]
        step = stack.plan(pose)
        issued = sim_time()
        with lock:
            flight.rec.plan(step, stack, stage)
            flight.commands.push(max(issued, pose.timestamp), step.primitive.a)

    def perception_worker() -> None:
        while (cloud := clouds.get()) is not None:
            with lock:
                stack.buffer.push_cloud(cloud)
                pairs = stack.buffer.pop_pairs()
            for c, pose in pairs:
                debug, stage = stack.perceive(c, pose)
                with lock:
                    flight.rec.perception(stack, c.timestamp, debug is not None)
                    if debug is not None and record_debug:
                        log.debug.append(debug)
                if flight.hover:
                    continue
                if shared:
                    do_plan(stage)
                else:
                    try:
                        plan_trigger.put_nowait((pose, stage))
                    except queue.Full:
                        pass  # planner busy; it will pick up the newer snapshot next time
        if not shared:
            plan_trigger.put(None)

    def planner_worker() -> None:
        while (item := plan_trigger.get()) is not None:
            do_plan(item[1])

    workers = [threading.Thread(target=perception_worker, daemon=True)]
    if not shared:
        workers.append(threading.Thread(target=planner_worker, daemon=True))
    for w in workers:
        w.start()
    with lock:
        stack.buffer.push_pose(flight.state.pose())
    n_ticks = int(round(duration / PHYSICS_DT))
    try:
        while flight.tick < n_ticks:
            lag = flight.state.t - sim_time()
            if lag > 0:
                time.sleep(lag)
            with lock:
                if flight.pose_due():
                    state_box["pose"] = flight.state.pose()
                    if flight.tick:
                        stack.buffer.push_pose(state_box["pose"])
                due = flight.camera_due()
            if due:
                clouds.put(flight.render())
            with lock:
                flight.advance()
                done = flight.check()
            if done:
                break
    finally:
        clouds.put(None)
        for w in workers:
            w.join(timeout=10.0)
    log.duration = _r(flight.state.t)
    log.rejected_frames = stack.rejected
