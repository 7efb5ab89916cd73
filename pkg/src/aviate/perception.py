"""Raw cloud filtering, motion gating and pose/cloud alignment.

The chain is fixed: distance -> voxel -> outlier.  The distance filter
runs in the body frame (it measures range from the camera).  The cloud is
then moved to the world frame so that the voxel grid is anchored at the
world origin and voxel membership is stable across frames.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    FilterConfig,
    FloatArray,
    Frame,
    PointCloudFrame,
    PoseState,
    body_to_world,
    wrap_angles,
)


class FrameRejected(Exception):
    """A frame was dropped by the pipeline.  ``reason`` is machine readable."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def distance_filter(cloud: PointCloudFrame, max_range: float) -> PointCloudFrame:
    """Keep points strictly closer than ``max_range`` to the origin.  Order preserved."""
    if len(cloud) == 0:
        return cloud
    keep = np.linalg.norm(cloud.xyz, axis=1) < max_range
    return cloud.select(keep)


def voxel_filter(cloud: PointCloudFrame, voxel: float) -> PointCloudFrame:
    """Replace the points of every occupied voxel with their centroid.

    The grid is anchored at the frame origin.  Output is ordered by voxel
    index (lexicographic), which makes it independent of input order.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    n = len(counts)
    xyz = np.zeros((n, 3))
    rgb = np.zeros((n, 3))
    np.add.at(xyz, inverse, cloud.xyz)
    np.add.at(rgb, inverse, cloud.rgb)
    xyz /= counts[:, None]
    rgb /= counts[:, None]
    return PointCloudFrame(xyz, np.clip(rgb, 0.0, 1.0), cloud.timestamp, cloud.frame)


def neighbor_counts(xyz: FloatArray, radius: float) -> np.ndarray:
    """Number of *other* points within ``radius`` of each point."""
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(xyz)
    return np.asarray(tree.query_ball_point(xyz, radius, return_length=True)) - 1


def outlier_filter(cloud: PointCloudFrame, radius: float, min_neighbors: int) -> PointCloudFrame:
    """Drop points with ``<= min_neighbors`` other points within ``radius``.

    Counts are taken on the input cloud, not incrementally.
    """
    if radius <= 0:
        raise ValueError("outlier radius must be positive")
    if len(cloud) == 0:
        return cloud
    return cloud.select(neighbor_counts(cloud.xyz, radius) > min_neighbors)


def angular_gate(pose: PoseState, omega_max: float) -> bool:
    """Accept iff every Euler rate is within ``omega_max`` (inclusive)."""
    return bool(np.all(np.abs(pose.v_e) <= omega_max))


def align_pose(pose: PoseState, t_c: float) -> tuple[FloatArray, FloatArray]:
    """Propagate position and orientation from the pose stamp to ``t_c``.

    Constant translational and angular acceleration over the gap.
    """
    dt = t_c - pose.timestamp
    if dt < 0:
        raise ValueError(f"cloud stamp {t_c} precedes pose stamp {pose.timestamp}")
    p_ali = pose.p + pose.v_p * dt + 0.5 * pose.a_p * dt * dt
    e_ali = wrap_angles(pose.e + pose.v_e * dt + 0.5 * pose.a_e * dt * dt)
    return p_ali, e_ali


@dataclass(frozen=True)
class AlignedFrame:
    """World-frame filtered cloud with the drone pose aligned to its stamp."""

    cloud: PointCloudFrame
    p_ali: FloatArray
    e_ali: FloatArray

    @property
    def timestamp(self) -> float:
        return self.cloud.timestamp

    @property
    def pose(self) -> PoseState:
        return PoseState(p=self.p_ali, e=self.e_ali, timestamp=self.timestamp)


def process_frame(
    cloud: PointCloudFrame,
    pose: PoseState,
    cfg: FilterConfig,
    mount: tuple[FloatArray, FloatArray] | None = None,
) -> AlignedFrame:
    """Run the full filter chain on a raw body-frame cloud.

    ``mount`` is the optional camera-to-body (R, t).  Raises
    :class:`FrameRejected` when the angular-rate gate fails; a cloud with
    nothing left after filtering is still accepted (empty).
    """
    if cloud.frame is not Frame.BODY:
        raise ValueError("process_frame expects a body-frame cloud")
    if not angular_gate(pose, cfg.omega_max):
        raise FrameRejected("gate", f"|v_e|={np.abs(pose.v_e).max():.3f} > {cfg.omega_max}")
    p_ali, e_ali = align_pose(pose, cloud.timestamp)

    stage = distance_filter(cloud, cfg.max_range)
    xyz = stage.xyz
    if mount is not None:
        xyz = xyz @ mount[0].T + mount[1]
    aligned = PoseState(p=p_ali, e=e_ali, timestamp=cloud.timestamp)
    world = PointCloudFrame(body_to_world(xyz, aligned), stage.rgb, cloud.timestamp, Frame.WORLD)
    world = voxel_filter(world, cfg.voxel)
    world = outlier_filter(world, cfg.outlier_radius, cfg.min_neighbors)
    return AlignedFrame(world, p_ali, e_ali)


class MessageBuffer:
    """Pairs clouds with the latest pose stamped at or before them.

    A pair is emitted when the gap is within ``max_gap``.  A cloud for which
    no such pose can still arrive (a newer pose is already buffered) is
    dropped.  Poses are assumed to arrive in stamp order.
    """

    def __init__(self, max_gap: float = 0.03) -> None:
        self.max_gap = max_gap
        self._pose_t: list[float] = []
        self._poses: list[PoseState] = []
        self._clouds: list[PointCloudFrame] = []
        self.dropped = 0

    def push_pose(self, pose: PoseState) -> None:
        if self._pose_t and pose.timestamp < self._pose_t[-1]:
            raise ValueError("pose stamps must be non-decreasing")
        self._pose_t.append(pose.timestamp)
        self._poses.append(pose)

    def push_cloud(self, cloud: PointCloudFrame) -> None:
        if self._clouds and cloud.timestamp < self._clouds[-1].timestamp:
            raise ValueError("cloud stamps must be non-decreasing")
        self._clouds.append(cloud)

    def pop_pairs(self) -> list[tuple[PointCloudFrame, PoseState]]:
        out = []
        pending = []
        for cloud in self._clouds:
            i = bisect.bisect_right(self._pose_t, cloud.timestamp) - 1
            if i >= 0 and cloud.timestamp - self._pose_t[i] <= self.max_gap:
                out.append((cloud, self._poses[i]))
            elif self._pose_t and self._pose_t[-1] > cloud.timestamp:
                self.dropped += 1
            else:
                pending.append(cloud)
        self._clouds = pending
        self._prune()
        return out

    def _prune(self) -> None:
        if not self._pose_t:
            return
        horizon = (self._clouds[0].timestamp if self._clouds else self._pose_t[-1]) - self.max_gap
        # keep the newest pose at or before the horizon as well
        cut = max(bisect.bisect_right(self._pose_t, horizon) - 1, 0)
        del self._pose_t[:cut]
        del self._poses[:cut]


_RECORD = np.dtype([("xyz", "<f4", (3,)), ("rgb", "u1", (3,))])


def dump_cloud(cloud: PointCloudFrame, path: str | Path) -> None:
    """Write a cloud as one JSON header line followed by packed records.

    Records are little-endian float32 x, y, z and three uint8 color bytes.
    """
    header = {"timestamp": cloud.timestamp, "frame": cloud.frame.value, "count": len(cloud)}
    rec = np.zeros(len(cloud), dtype=_RECORD)
    rec["xyz"] = cloud.xyz
    rec["rgb"] = np.round(np.clip(cloud.rgb, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(rec.tobytes())


def load_cloud(path: str | Path) -> PointCloudFrame:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    rec = np.frombuffer(payload, dtype=_RECORD)
    if len(rec) != header["count"]:
        raise ValueError(f"{path}: header count {header['count']} != {len(rec)} records")
    return PointCloudFrame(
        rec["xyz"].astype(np.float64),
        rec["rgb"].astype(np.float64) / 255.0,
        float(header["timestamp"]),
        Frame(header["frame"]),
    )


def reduction_ratio(raw: int, filtered: int) -> float:
    """Raw/filtered point-count ratio (inf when everything was removed)."""
    return math.inf if filtered == 0 else raw / filtered

