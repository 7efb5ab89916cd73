"""Static/dynamic obstacle sorting from two time-separated world-frame clouds."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import CameraModel, ClassifierConfig, FloatArray, PoseState, StackConfig, world_to_body
from .perception import AlignedFrame
from .tracker import Detection, SphereEstimate, overlay_deform, sphere_fit

NOISE = -1


def dbscan(xyz: FloatArray, eps: float, min_pts: int, core_only: bool = False) -> np.ndarray:
    """Density clustering.  Returns one label per point, ``NOISE`` for noise.

    A point is core when its closed ``eps`` ball holds at least ``min_pts``
    points, itself included.  Clusters are connected components of the core
    graph, numbered by their lowest core index.  A border point joins the
    cluster of its lowest-index core neighbour, unless ``core_only`` is set,
    in which case border points are noise.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("dbscan needs eps > 0 and min_pts >= 1")
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(xyz)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)
    np.add.at(counts, pairs[:, 0], 1)
    np.add.at(counts, pairs[:, 1], 1)
    core = counts >= min_pts
    if not core.any():
        return labels

    i, j = pairs[:, 0], pairs[:, 1]
    both = core[i] & core[j]
    graph = coo_matrix((np.ones(both.sum()), (i[both], j[both])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    # renumber components by their first (lowest-index) core point
    first_seen: dict[int, int] = {}
    for idx in core_idx:
        first_seen.setdefault(int(comp[idx]), len(first_seen))
    labels[core_idx] = [first_seen[int(comp[idx])] for idx in core_idx]
    if core_only:
        return labels

    # border points: lowest-index core neighbour wins
    best = np.full(n, n, dtype=np.int64)
    a = core[i] & ~core[j]
    np.minimum.at(best, j[a], i[a])
    b = core[j] & ~core[i]
    np.minimum.at(best, i[b], j[b])
    border = (~core) & (best < n)
    labels[border] = labels[best[border]]
    return labels


@dataclass(frozen=True)
class Cluster:
    xyz: FloatArray
    rgb: FloatArray
    timestamp: float
    label: int = 0

    @property
    def center(self) -> FloatArray:
        return self.xyz.mean(axis=0)

    def __len__(self) -> int:
        return len(self.xyz)


def clusters_from_labels(frame_xyz: FloatArray, frame_rgb: FloatArray, labels: np.ndarray, t: float) -> list[Cluster]:
    out = []
    for lab in range(int(labels.max(initial=NOISE)) + 1):
        mask = labels == lab
        out.append(Cluster(frame_xyz[mask], frame_rgb[mask], t, lab))
    return out


def fov_mask(xyz: FloatArray, pose: PoseState, cam: CameraModel, max_range: float | None = None) -> np.ndarray:
    """Mask of world points inside the camera frustum at ``pose``.

    In camera coordinates (x forward) a point is visible when x > 0, its
    range is at most ``max_range``, ``|atan2(y, x)| <= hfov/2`` and
    ``|atan2(z, x)| <= vfov/2``.  Boundaries are inclusive.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        return np.zeros(0, dtype=bool)
    rng = cam.max_range if max_range is None else max_range
    c = (world_to_body(xyz, pose) - cam.mount_t) @ cam.mount_R
    x, y, z = c[:, 0], c[:, 1], c[:, 2]
    tol = 1e-12
    return (
        (x > 0)
        & (np.linalg.norm(c, axis=1) <= rng + tol)
        & (np.abs(np.arctan2(y, x)) <= cam.hfov / 2 + tol)
        & (np.abs(np.arctan2(z, x)) <= cam.vfov / 2 + tol)
    )


def fov_cull(xyz: FloatArray, pose: PoseState, cam: CameraModel, max_range: float | None = None) -> FloatArray:
    return np.asarray(xyz, dtype=np.float64).reshape(-1, 3)[fov_mask(xyz, pose, cam, max_range)]


@dataclass(frozen=True)
class FeatureVector:
    center: FloatArray
    count: int
    spread: float
    volume: float
    color_mean: float
    color_var: float

    def as_array(self, cfg: ClassifierConfig | None = None) -> FloatArray:
        """Feature vector with every component divided by its configured scale."""
        cfg = cfg or ClassifierConfig()
        return np.concatenate(
            [
                self.center / cfg.scale_center,
                [
                    self.count / cfg.scale_count,
                    self.spread / cfg.scale_spread,
                    self.volume / cfg.scale_volume,
                    self.color_mean / cfg.scale_color_mean,
                    self.color_var / cfg.scale_color_var,
                ],
            ]
        )


def feature_vector(cluster: Cluster, center: FloatArray | None = None) -> FeatureVector:
    """Six-part cluster descriptor: center, size, spread, box volume, color mean and variance.

    ``center`` overrides the centroid (the classifier passes the fitted
    sphere center).
    """
    if len(cluster) == 0:
        raise ValueError("feature_vector of an empty cluster")
    xyz, rgb = cluster.xyz, cluster.rgb
    extent = xyz.max(axis=0) - xyz.min(axis=0)
    return FeatureVector(
        center=xyz.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64),
        count=len(xyz),
        spread=float(xyz.var(axis=0).mean()),
        volume=float(np.prod(extent)),
        color_mean=float(rgb.mean()),
        color_var=float(rgb.var(axis=0).mean()),
    )


@dataclass
class MatchResult:
    static: list[int] = field(default_factory=list)
    dynamic: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)
    pairs: list[tuple[int, int, float, float]] = field(default_factory=list)


def match_and_classify(
    f1: list[FeatureVector], f2: list[FeatureVector], cfg: ClassifierConfig
) -> MatchResult:
    """Match latest-frame clusters to former-frame clusters and sort them.

    Matching is greedy one-to-one on ascending normalized feature distance;
    a pair counts only when that distance is below ``d_ecd``.  A matched
    cluster whose center moved less than ``d_s`` is static, otherwise
    dynamic.  Latest-frame clusters without a match are newly appeared and
    are reported in ``unmatched`` only.
    """
    res = MatchResult()
    if not f2:
        return res
    if not f1:
        res.unmatched = list(range(len(f2)))
        return res
    a1 = np.array([f.as_array(cfg) for f in f1])
    a2 = np.array([f.as_array(cfg) for f in f2])
    d = np.linalg.norm(a2[:, None, :] - a1[None, :, :], axis=2)
    taken1: set[int] = set()
    matched: dict[int, int] = {}
    for flat in np.argsort(d, axis=None, kind="stable"):
        k, j = divmod(int(flat), len(f1))
        if d[k, j] >= cfg.d_ecd:
            break
        if k in matched or j in taken1:
            continue
        matched[k] = j
        taken1.add(j)
    for k in range(len(f2)):
        if k not in matched:
            res.unmatched.append(k)
            continue
        j = matched[k]
        d_kj = float(np.linalg.norm(f2[k].center - f1[j].center))
        res.pairs.append((k, j, float(d[k, j]), d_kj))
        if d_kj < cfg.d_s:
            res.static.append(k)
        else:
            res.dynamic.append((k, j))
    return res


class StaticMemory:
    """Bounded FIFO of static cluster points; evicts whole clusters, oldest first.

    With a ``resolution`` a point is stored only if its grid cell is not
    already held, so re-observing the same wall does not flush older
    geometry out of the buffer.
    """

    def __init__(self, capacity: int, resolution: float | None = None) -> None:
        self.capacity = capacity
        self.resolution = resolution
        self._chunks: collections.deque[tuple[FloatArray, list[tuple[int, int, int]]]] = collections.deque()
        self._cells: set[tuple[int, int, int]] = set()
        self._size = 0
        self._cache: FloatArray | None = np.zeros((0, 3))

    def __len__(self) -> int:
        return self._size

    def add(self, xyz: FloatArray) -> None:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        keys: list[tuple[int, int, int]] = []
        if self.resolution is not None and len(xyz):
            cells = np.floor(xyz / self.resolution).astype(np.int64)
            _, first = np.unique(cells, axis=0, return_index=True)
            first.sort()
            fresh = [i for i in first if tuple(cells[i]) not in self._cells]
            xyz = xyz[fresh]
            keys = [tuple(int(c) for c in cells[i]) for i in fresh]
        if len(xyz) == 0:
            return
        if len(xyz) > self.capacity:
            xyz = xyz[-self.capacity :]
            keys = keys[-self.capacity :]
        self._chunks.append((xyz, keys))
        self._cells.update(keys)
        self._size += len(xyz)
        while self._size > self.capacity:
            old, old_keys = self._chunks.popleft()
            self._size -= len(old)
            self._cells.difference_update(old_keys)
        self._cache = None

    def snapshot(self) -> FloatArray:
        if self._cache is None:
            self._cache = np.vstack([c for c, _ in self._chunks]) if self._chunks else np.zeros((0, 3))
            self._cache.setflags(write=False)
        return self._cache


@dataclass(frozen=True)
class ClassifierOutput:
    t1: float
    t2: float
    static_points: FloatArray
    detections: list[Detection]
    debug: dict[str, Any]


class ObstacleClassifier:
    """Sequential worker consuming aligned frames.

    ``step()`` selects the latest frame and the newest earlier frame at
    least ``d_t`` older, culls both to the common field of view, clusters,
    fits sphere centers, matches clusters and sorts them.  Static points go
    to the persistent memory; detections are fresh every call.
    """

    def __init__(self, cfg: StackConfig | None = None, camera: CameraModel | None = None) -> None:
        cfg = cfg or StackConfig()
        self.cfg = cfg.classifier
        self.max_range = cfg.filter.max_range
        self.sphere_eps = cfg.tracker.sphere_eps
        self.camera = camera or CameraModel()
        self.history: collections.deque[AlignedFrame] = collections.deque()
        self.memory = StaticMemory(self.cfg.static_capacity, cfg.filter.voxel)

    def push(self, frame: AlignedFrame) -> None:
        if self.history and frame.timestamp < self.history[-1].timestamp:
            raise ValueError("frames must arrive in stamp order")
        self.history.append(frame)
        # keep the horizon plus one frame so a d_t-old partner stays available
        while len(self.history) > 2 and frame.timestamp - self.history[1].timestamp >= self.cfg.history:
            self.history.popleft()

    def select_frames(self) -> tuple[int, int] | None:
        if len(self.history) < 2:
            return None
        t2 = self.history[-1].timestamp
        for i in range(len(self.history) - 2, -1, -1):
            if t2 - self.history[i].timestamp >= self.cfg.d_t - 1e-9:
                return i, len(self.history) - 1
        return None

    def step(self) -> ClassifierOutput | None:
        sel = self.select_frames()
        if sel is None:
            return None
        i1, i2 = sel
        f1, f2 = self.history[i1], self.history[i2]
        min_pts = self.cfg.min_pts
        core_only = False
        if self.cfg.overlay:
            # sparse swinging limbs fall below the raised density and are dropped
            core_only = True
            f1 = overlay_deform(f1, self.history[i1 - 1] if i1 > 0 else None)
            f2 = overlay_deform(f2, self.history[i2 - 1])
            min_pts = max(1, int(math.ceil(self.cfg.min_pts * self.cfg.overlay_min_pts_factor)))
        pose1, pose2 = f1.pose, f2.pose

        keep2 = fov_mask(f2.cloud.xyz, pose1, self.camera, self.max_range)
        keep1 = fov_mask(f1.cloud.xyz, pose2, self.camera, self.max_range)
        xyz1, rgb1 = f1.cloud.xyz[keep1], f1.cloud.rgb[keep1]
        xyz2, rgb2 = f2.cloud.xyz[keep2], f2.cloud.rgb[keep2]
        ot1 = clusters_from_labels(xyz1, rgb1, dbscan(xyz1, self.cfg.eps, min_pts, core_only), f1.timestamp)
        ot2 = clusters_from_labels(xyz2, rgb2, dbscan(xyz2, self.cfg.eps, min_pts, core_only), f2.timestamp)

        # both frames are fitted from the latest viewpoint so a static object
        # yields the same center in each
        view = f2.p_ali
        s1 = [sphere_fit(c.xyz, view, self.sphere_eps, c.label) for c in ot1]
        s2 = [sphere_fit(c.xyz, view, self.sphere_eps, c.label) for c in ot2]
        fe1 = [feature_vector(c, s.center) for c, s in zip(ot1, s1)]
        fe2 = [feature_vector(c, s.center) for c, s in zip(ot2, s2)]
        res = match_and_classify(fe1, fe2, self.cfg)

        for k in res.static:
            self.memory.add(ot2[k].xyz)
        detections = []
        for k, j in res.dynamic:
            c2, c1 = s2[k].center, s1[j].center
            assert np.linalg.norm(c2 - c1) >= self.cfg.d_s
            detections.append(Detection(c2, c1, f1.timestamp, f2.timestamp, s2[k].radius, ot2[k].xyz))
        debug = _debug_record(f1.timestamp, f2.timestamp, ot1, ot2, s1, s2, res)
        return ClassifierOutput(f1.timestamp, f2.timestamp, self.memory.snapshot(), detections, debug)


def _debug_record(
    t1: float,
    t2: float,
    ot1: list[Cluster],
    ot2: list[Cluster],
    s1: list[SphereEstimate],
    s2: list[SphereEstimate],
    res: MatchResult,
) -> dict[str, Any]:
    def clusters(ot: list[Cluster], sph: list[SphereEstimate]) -> list[dict[str, Any]]:
        return [
            {"label": c.label, "count": len(c), "center": s.center.round(4).tolist(), "radius": round(s.radius, 4)}
            for c, s in zip(ot, sph)
        ]

    labels = {k: "static" for k in res.static}
    labels.update({k: "dynamic" for k, _ in res.dynamic})
    return {
        "t1": t1,
        "t2": t2,
        "clusters1": clusters(ot1, s1),
        "clusters2": clusters(ot2, s2),
        "matches": [
            {"k": k, "j": j, "d_fte": round(dfte, 5), "d_kj": round(dkj, 5), "class": labels[k]}
            for k, j, dfte, dkj in res.pairs
        ],
        "unmatched": res.unmatched,
    }
