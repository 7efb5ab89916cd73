import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from aviate.classifier import (
    NOISE,
    Cluster,
    ObstacleClassifier,
    StaticMemory,
    dbscan,
    feature_vector,
    fov_cull,
    fov_mask,
    match_and_classify,
)
from aviate.core import CameraModel, ClassifierConfig, PoseState, StackConfig
from aviate.perception import process_frame
from aviate.sim import Actor, Box, Scene, render_cloud
from oracles import dbscan_oracle, fov_oracle


def check_against_oracle(xyz, eps, min_pts):
    labels = dbscan(xyz, eps, min_pts)
    core, clusters, border, nbrs = dbscan_oracle(xyz, eps, min_pts)
    got = {}
    for i, lab in enumerate(labels):
        if core[i]:
            got.setdefault(lab, set()).add(i)
    assert {frozenset(s) for s in got.values()} == clusters
    for i in range(len(xyz)):
        if core[i]:
            continue
        if i in border:
            # joins the cluster of its lowest-index core neighbour
            first = min(j for j in nbrs[i] if core[j])
            assert labels[i] == labels[first]
        else:
            assert labels[i] == NOISE
    return labels


def test_dbscan_examples():
    assert len(dbscan(np.zeros((0, 3)), 0.5, 5)) == 0
    rng = np.random.default_rng(0)
    blobs = np.vstack([rng.normal(0, 0.1, (30, 3)), rng.normal(0, 0.1, (30, 3)) + [5, 0, 0]])
    labels = check_against_oracle(blobs, 0.5, 5)
    assert set(labels) == {0, 1}
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1
    line = np.array([[0, 0, 0], [10, 0, 0], [20, 0, 0]], dtype=float)
    assert np.all(dbscan(line, 0.5, 4) == NOISE)


def test_dbscan_matches_oracle_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 70))
        xyz = rng.uniform(0, 2.0, (n, 3))
        check_against_oracle(xyz, float(rng.uniform(0.2, 0.6)), int(rng.integers(1, 7)))


def test_dbscan_core_only_drops_border():
    # five core points on a short line, the last point reaches only two of them
    xyz = np.array([[0.01 * k, 0, 0] for k in range(5)] + [[0.37, 0, 0]])
    assert dbscan(xyz, 0.35, 5)[-1] == 0
    assert dbscan(xyz, 0.35, 5, core_only=True)[-1] == NOISE


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(0, 2)), st.randoms())
def test_dbscan_permutation_invariant(xyz, rnd):
    perm = list(range(len(xyz)))
    rnd.shuffle(perm)
    a = dbscan(xyz, 0.4, 3)
    b = dbscan(xyz[perm], 0.4, 3)
    core = dbscan(xyz, 0.4, 3, core_only=True)

    def groups(labels, idx):
        out = {}
        for i, lab in zip(idx, labels):
            if core[i] != NOISE:
                out.setdefault(lab, set()).add(i)
        return {frozenset(g) for g in out.values()}

    assert groups(a, range(len(xyz))) == groups(b, perm)
    assert (a == NOISE).sum() == (b == NOISE).sum()


def test_fov_examples():
    pose = PoseState(p=(0, 0, 0), e=(0, 0, 0))
    cam = CameraModel()
    h = cam.hfov / 2
    pts = np.array([[-1.0, 0, 0], [1.0, 0, 0], [math.cos(h), math.sin(h), 0.0], [math.cos(h + 0.01), math.sin(h + 0.01), 0],
                    [11.0, 0, 0]])
    np.testing.assert_array_equal(fov_mask(pts, pose, cam), [False, True, True, False, False])
    assert len(fov_cull(np.zeros((0, 3)), pose, cam)) == 0


def test_fov_matches_oracle_on_random_instances():
    rng = np.random.default_rng(3)
    cam = CameraModel()
    for _ in range(100):
        e = rng.uniform(-math.pi, math.pi, 3)
        pose = PoseState(p=rng.uniform(-2, 2, 3), e=e)
        pts = pose.p + rng.uniform(-6, 6, (30, 3))
        R = Rotation.from_euler("ZYX", [e[2], e[1], e[0]]).as_matrix()
        local = (pts - pose.p) @ R
        want = [fov_oracle(q, cam.hfov, cam.vfov, 4.0) for q in local]
        np.testing.assert_array_equal(fov_mask(pts, pose, cam, 4.0), want)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 30), st.just(3)), elements=st.floats(-5, 5)),
       st.floats(-math.pi, math.pi))
def test_fov_cull_idempotent(xyz, yaw):
    pose = PoseState(p=(0, 0, 0), e=(0, 0, yaw))
    once = fov_cull(xyz, pose, CameraModel())
    np.testing.assert_array_equal(fov_cull(once, pose, CameraModel()), once)


def test_feature_examples():
    single = Cluster(np.array([[1.0, 2.0, 3.0]]), np.full((1, 3), 0.5), 0.0)
    f = feature_vector(single)
    np.testing.assert_allclose(f.center, [1, 2, 3])
    assert (f.count, f.spread, f.volume, f.color_mean, f.color_var) == (1, 0.0, 0.0, 0.5, 0.0)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    g = feature_vector(Cluster(corners, np.full((8, 3), 0.2), 0.0))
    assert g.volume == pytest.approx(1.0)
    np.testing.assert_allclose(g.center, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        feature_vector(Cluster(np.zeros((0, 3)), np.zeros((0, 3)), 0.0))


def test_feature_matches_plain_statistics():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        xyz = rng.normal(0, 1, (n, 3))
        rgb = rng.uniform(0, 1, (n, 3))
        f = feature_vector(Cluster(xyz, rgb, 0.0))
        cols = [[p[k] for p in xyz] for k in range(3)]
        mean = [sum(c) / n for c in cols]
        var = [sum((x - m) ** 2 for x in c) / n for c, m in zip(cols, mean)]
        vol = 1.0
        for c in cols:
            vol *= max(c) - min(c)
        flat = [x for row in rgb for x in row]
        ccols = [[row[k] for row in rgb] for k in range(3)]
        cmean = [sum(c) / n for c in ccols]
        cvar = [sum((x - m) ** 2 for x in c) / n for c, m in zip(ccols, cmean)]
        np.testing.assert_allclose(f.center, mean, atol=1e-12)
        assert f.spread == pytest.approx(sum(var) / 3)
        assert f.volume == pytest.approx(vol, abs=1e-12)
        assert f.color_mean == pytest.approx(sum(flat) / len(flat))
        assert f.color_var == pytest.approx(sum(cvar) / 3, abs=1e-12)


def blob_feature(offset, seed=0):
    xyz = np.random.default_rng(seed).normal(0, 0.1, (40, 3)) + offset
    return feature_vector(Cluster(xyz, np.full((40, 3), 0.4), 0.0))


def test_match_examples():
    cfg = ClassifierConfig()
    a = blob_feature([2, 0, 1])
    res = match_and_classify([a], [a], cfg)
    assert res.static == [0] and res.dynamic == []
    moved = blob_feature([2, 0.3, 1])
    res = match_and_classify([a], [moved], cfg)
    assert res.dynamic == [(0, 0)] and res.static == []
    assert res.pairs[0][3] == pytest.approx(0.3, abs=1e-9)
    res = match_and_classify([a], [a, blob_feature([9, 9, 9])], cfg)
    assert res.static == [0] and res.unmatched == [1]
    res = match_and_classify([], [a], cfg)
    assert res.unmatched == [0] and not res.static and not res.dynamic


def test_match_is_one_to_one():
    cfg = ClassifierConfig()
    a = blob_feature([2, 0, 1])
    res = match_and_classify([a], [a, blob_feature([2, 0.05, 1], seed=1)], cfg)
    assert len(res.static) + len(res.dynamic) == 1 and len(res.unmatched) == 1


def test_static_memory_fifo_and_dedupe():
    mem = StaticMemory(10)
    mem.add(np.zeros((4, 3)))
    mem.add(np.ones((4, 3)))
    mem.add(np.full((4, 3), 2.0))
    assert len(mem) == 8
    assert not np.any(np.all(mem.snapshot() == 0.0, axis=1))
    big = StaticMemory(5)
    big.add(np.arange(30, dtype=float).reshape(10, 3))
    assert len(big) == 5
    grid = StaticMemory(100, resolution=0.2)
    pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.03, 0.05], [0.5, 0, 0]])
    grid.add(pts)
    grid.add(pts + 0.01)
    assert len(grid) == 2
    # an evicted cell can be stored again
    small = StaticMemory(1, resolution=0.2)
    small.add(pts[:1])
    small.add(pts[2:])
    small.add(pts[:1])
    np.testing.assert_allclose(small.snapshot(), pts[:1])


def frames_for(scene, poses, cfg):
    out = []
    for k, pose in enumerate(poses):
        raw = render_cloud(scene, pose, scene.camera, seed=k)
        out.append(process_frame(raw, pose, cfg.filter))
    return out


def test_static_scene_has_no_detections():
    scene = Scene("box", 1.0, 0, np.zeros(3), np.zeros(3), static=(Box(np.array([2.5, -0.5, 1.0]), np.array([3.0, 0.5, 2.0])),),
                  camera=CameraModel(width=212, height=120))
    cfg = StackConfig()
    clf = ObstacleClassifier(cfg, scene.camera)
    poses = [PoseState(p=(0.1 * k, 0, 1.5), e=(0, 0, 0), v_p=(1, 0, 0), timestamp=0.1 * k) for k in range(6)]
    outs = []
    for f in frames_for(scene, poses, cfg):
        clf.push(f)
        out = clf.step()
        if out is not None:
            outs.append(out)
            assert out.detections == []
    assert outs and len(outs[-1].static_points) > 0


def test_translating_sphere_gives_one_detection():
    ball = Actor("ball", "sphere", 0.3, np.array([0.0, 4.0]), np.array([[2.5, -2.0, 1.5], [2.5, 2.0, 1.5]]))
    scene = Scene("ball", 4.0, 0, np.zeros(3), np.zeros(3), actors=(ball,), camera=CameraModel(width=212, height=120))
    cfg = StackConfig()
    clf = ObstacleClassifier(cfg, scene.camera)
    poses = [PoseState(p=(0, 0, 1.5), e=(0, 0, 0), timestamp=1.8 + 0.1 * k) for k in range(3)]
    out = None
    for f in frames_for(scene, poses, cfg):
        clf.push(f)
        out = clf.step() or out
    assert out is not None and out.t2 - out.t1 == pytest.approx(0.2)
    assert len(out.detections) == 1
    det = out.detections[0]
    assert np.linalg.norm(det.center - det.prior_center) == pytest.approx(0.2, abs=0.06)
    assert np.linalg.norm(det.velocity - [0, 1, 0]) < 0.3


def test_memory_keeps_points_outside_view():
    scene = Scene("box", 1.0, 0, np.zeros(3), np.zeros(3), static=(Box(np.array([2.5, -0.5, 1.0]), np.array([3.0, 0.5, 2.0])),),
                  camera=CameraModel(width=212, height=120))
    cfg = StackConfig()
    clf = ObstacleClassifier(cfg, scene.camera)
    looking = [PoseState(p=(0, 0, 1.5), e=(0, 0, 0), timestamp=0.1 * k) for k in range(3)]
    away = [PoseState(p=(0, 0, 1.5), e=(0, 0, math.pi), timestamp=0.3 + 0.1 * k) for k in range(3)]
    for f in frames_for(scene, looking + away, cfg):
        clf.push(f)
        out = clf.step()
    assert len(out.static_points) > 0
    assert np.all(out.static_points[:, 0] > 2.0)


def test_step_needs_history():
    clf = ObstacleClassifier()
    assert clf.step() is None
