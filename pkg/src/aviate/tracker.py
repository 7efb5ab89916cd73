"""Moving-obstacle estimation: sphere fitting, Kalman smoothing, association."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import FloatArray, KalmanConfig, PointCloudFrame, StackConfig, TrackerConfig, as_point, wrap_angles
from .perception import AlignedFrame

# below this tangent angle the cap is a single ray and the geometry is meaningless
_MIN_ALPHA = 1e-6
_MAX_ALPHA = math.pi / 2 - 1e-3


@dataclass(frozen=True)
class SphereEstimate:
    center: FloatArray
    radius: float
    fallback: bool = False
    cluster_id: int = -1


def bounding_sphere(xyz: FloatArray) -> SphereEstimate:
    g = xyz.mean(axis=0)
    r = float(np.linalg.norm(xyz - g, axis=1).max()) if len(xyz) else 0.0
    return SphereEstimate(g, max(r, 1e-6), fallback=True)


def tangent_sphere(p_n: FloatArray, p_g: FloatArray, p_m: FloatArray) -> SphereEstimate | None:
    """Sphere tangent to the ray p_n->p_m whose center lies on the ray p_n->p_g.

    Returns ``None`` when the angle between the two rays is degenerate.
    """
    a = float(np.linalg.norm(p_m - p_n))
    b = float(np.linalg.norm(p_g - p_n))
    c = float(np.linalg.norm(p_m - p_g))
    if a == 0.0 or b == 0.0:
        return None
    cos_alpha = (a * a + b * b - c * c) / (2.0 * a * b)
    alpha = math.acos(min(1.0, max(-1.0, cos_alpha)))
    if not _MIN_ALPHA <= alpha <= _MAX_ALPHA:
        return None
    radius = a * math.tan(alpha)
    dist = a / math.cos(alpha)
    center = p_n + (p_g - p_n) / b * dist
    return SphereEstimate(center, radius)


def sphere_fit(xyz: FloatArray, p_n: FloatArray, eps: float = 0.05, cluster_id: int = -1) -> SphereEstimate:
    """Fit a sphere to the visible part of an obstacle seen from ``p_n``.

    The radius is grown when needed so every cluster point lies inside the
    sphere inflated by ``eps``.  Degenerate geometry falls back to the
    bounding sphere around the centroid.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise ValueError("cannot fit a sphere to an empty cluster")
    p_n = as_point(p_n)
    p_g = xyz.mean(axis=0)
    d = np.linalg.norm(xyz - p_g, axis=1)
    p_m = xyz[int(np.argmax(d))]
    est = tangent_sphere(p_n, p_g, p_m) if len(xyz) >= 2 else None
    if est is None:
        fb = bounding_sphere(xyz)
        return SphereEstimate(fb.center, fb.radius, True, cluster_id)
    reach = float(np.linalg.norm(xyz - est.center, axis=1).max())
    return SphereEstimate(est.center, max(est.radius, reach - eps), False, cluster_id)


def transition(dt: float) -> tuple[FloatArray, FloatArray]:
    """Constant-velocity transition F and acceleration input B for 3-D position/velocity."""
    eye = np.eye(3)
    F = np.block([[eye, dt * eye], [np.zeros((3, 3)), eye]])
    B = np.vstack([0.5 * dt * dt * eye, dt * eye])
    return F, B


def kalman_predict(
    x: FloatArray, P: FloatArray, dt: float, Q: FloatArray, accel: FloatArray | None = None
) -> tuple[FloatArray, FloatArray]:
    F, B = transition(dt)
    a = np.zeros(3) if accel is None else accel
    return F @ x + B @ a, F @ P @ F.T + Q


def kalman_update(x: FloatArray, P: FloatArray, z: FloatArray, R: FloatArray) -> tuple[FloatArray, FloatArray]:
    z = np.asarray(z, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite observation")
    S = P + R
    K = np.linalg.solve(S.T, P.T).T
    P_post = (np.eye(6) - K) @ P
    return x + K @ (z - x), 0.5 * (P_post + P_post.T)


def kalman_step(
    x: FloatArray,
    P: FloatArray,
    observation: FloatArray | None,
    dt: float,
    Q: FloatArray,
    R: FloatArray,
    accel: FloatArray | None = None,
) -> tuple[FloatArray, FloatArray]:
    """One predict(+update) cycle with H = I on the stacked (position, velocity) state.

    Without an observation the prediction is returned unchanged.
    """
    if dt <= 0:
        raise ValueError("kalman_step needs dt > 0")
    x, P = kalman_predict(x, P, dt, Q, accel)
    if observation is None:
        return x, P
    return kalman_update(x, P, observation, R)


def raw_velocity(c2: FloatArray, c1: FloatArray, t1: float, t2: float) -> FloatArray:
    if t2 <= t1:
        raise ValueError("raw_velocity needs t2 > t1")
    return (np.asarray(c2, dtype=np.float64) - np.asarray(c1, dtype=np.float64)) / (t2 - t1)


@dataclass(frozen=True)
class Detection:
    """A cluster classified as moving: latest center, matched prior center, stamps."""

    center: FloatArray
    prior_center: FloatArray
    t1: float
    t2: float
    radius: float
    points: FloatArray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def velocity(self) -> FloatArray:
        return raw_velocity(self.center, self.prior_center, self.t1, self.t2)


@dataclass(frozen=True)
class TrackSnapshot:
    track_id: int
    center: FloatArray
    velocity: FloatArray
    radius: float
    timestamp: float
    observed: bool
    hits: int = 1


@dataclass
class ObstacleTrack:
    track_id: int
    x: FloatArray
    P: FloatArray
    radius: float
    last_update: float
    last_observed: float
    observed: bool = True
    hits: int = 1

    @property
    def center(self) -> FloatArray:
        return self.x[:3]

    @property
    def velocity(self) -> FloatArray:
        return self.x[3:]

    def predicted_center(self, t: float) -> FloatArray:
        return self.center + self.velocity * max(t - self.last_update, 0.0)

    def snapshot(self) -> TrackSnapshot:
        return TrackSnapshot(
            self.track_id, self.center.copy(), self.velocity.copy(), self.radius, self.last_update, self.observed,
            self.hits,
        )


def track_associate(
    predicted: list[FloatArray], detections: list[FloatArray], gate: float
) -> tuple[list[tuple[int, int]], list[int]]:
    """Greedy global nearest neighbour.

    Returns ``(pairs, unassigned_detections)`` where pairs are
    ``(track_index, detection_index)``; candidate pairs are taken in
    ascending distance, each side used at most once, gated at ``gate``.
    """
    if not predicted or not detections:
        return [], list(range(len(detections)))
    tp = np.asarray(predicted).reshape(-1, 3)
    dp = np.asarray(detections).reshape(-1, 3)
    dist = np.linalg.norm(tp[:, None, :] - dp[None, :, :], axis=2)
    order = np.argsort(dist, axis=None, kind="stable")
    used_t: set[int] = set()
    used_d: set[int] = set()
    pairs = []
    for flat in order:
        i, j = divmod(int(flat), dist.shape[1])
        if dist[i, j] > gate:
            break
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        pairs.append((i, j))
    return pairs, [j for j in range(len(detections)) if j not in used_d]


def is_moving(track: TrackSnapshot, cfg: TrackerConfig) -> bool:
    """Whether a track is trusted as a moving obstacle.

    Young tracks, slow ones and clusters too large for a person or a ball
    (usually jittering fragments of walls) are left to the static check.
    """
    return (
        track.hits >= cfg.confirm_hits
        and track.radius <= cfg.max_dynamic_radius
        and float(np.linalg.norm(track.velocity)) >= cfg.min_dynamic_speed
    )


class Tracker:
    """Keeps one constant-velocity Kalman filter per moving obstacle."""

    def __init__(self, kalman: KalmanConfig | None = None, cfg: TrackerConfig | None = None) -> None:
        self.kalman = kalman or KalmanConfig()
        self.cfg = cfg or TrackerConfig()
        self.Q, self.R, self.P0 = self.kalman.matrices()
        self.tracks: list[ObstacleTrack] = []
        # track id per detection of the last step
        self.assignment: list[int] = []
        self._ids = itertools.count()

    @classmethod
    def from_config(cls, cfg: StackConfig) -> Tracker:
        return cls(cfg.kalman, cfg.tracker)

    def step(self, t: float, detections: list[Detection] | None = None) -> list[TrackSnapshot]:
        """Advance every track to ``t`` and fold in the detections made at ``t``."""
        detections = detections or []
        self.assignment = [-1] * len(detections)
        for track in self.tracks:
            track.observed = False
        predicted = [trk.predicted_center(t) for trk in self.tracks]
        pairs, fresh = track_associate(predicted, [d.center for d in detections], self.cfg.gate)
        assigned = dict(pairs)
        for i, track in enumerate(self.tracks):
            det = detections[assigned[i]] if i in assigned else None
            obs = np.concatenate([det.center, det.velocity]) if det is not None else None
            dt = t - track.last_update
            if dt > 0:
                track.x, track.P = kalman_predict(track.x, track.P, dt, self.Q)
            if obs is not None:
                track.x, track.P = kalman_update(track.x, track.P, obs, self.R)
            track.last_update = max(track.last_update, t)
            if det is not None:
                lam = self.cfg.radius_ema
                track.radius = lam * det.radius + (1.0 - lam) * track.radius
                track.last_observed = t
                track.observed = True
                track.hits += 1
                self.assignment[assigned[i]] = track.track_id
            self._clamp(track)
        for j in fresh:
            det = detections[j]
            x = np.concatenate([det.center, det.velocity])
            track = ObstacleTrack(next(self._ids), x, self.P0.copy(), det.radius, t, t, True)
            self._clamp(track)
            self.tracks.append(track)
            self.assignment[j] = track.track_id
        self.tracks = [trk for trk in self.tracks if t - trk.last_observed <= self.cfg.stale_after]
        return self.snapshot()

    def snapshot(self) -> list[TrackSnapshot]:
        return [trk.snapshot() for trk in self.tracks]

    def _clamp(self, track: ObstacleTrack) -> None:
        speed = float(np.linalg.norm(track.x[3:]))
        if speed > self.cfg.max_speed:
            track.x[3:] *= self.cfg.max_speed / speed


def overlay_deform(latest: AlignedFrame, previous: AlignedFrame | None) -> AlignedFrame:
    """Overlay two neighbouring frames and average their poses.

    Trunk points of a walking body coincide between neighbouring frames
    while swinging limbs do not, so the merged cloud is denser on the trunk.
    The result keeps the latest stamp.
    """
    if previous is None:
        return latest
    a, b = latest.cloud, previous.cloud
    merged = PointCloudFrame(np.vstack([a.xyz, b.xyz]), np.vstack([a.rgb, b.rgb]), a.timestamp, a.frame)
    p = 0.5 * (latest.p_ali + previous.p_ali)
    # average angles through their wrapped difference
    e = wrap_angles(latest.e_ali + 0.5 * wrap_angles(previous.e_ali - latest.e_ali))
    return AlignedFrame(merged, p, e)
