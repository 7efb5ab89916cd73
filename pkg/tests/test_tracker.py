import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aviate.core import CameraModel, Frame, KalmanConfig, PointCloudFrame, PoseState, TrackerConfig
from aviate.perception import AlignedFrame
from aviate.sim import Scene, Sphere, render_cloud
from aviate.tracker import (
    Detection,
    Tracker,
    TrackSnapshot,
    is_moving,
    kalman_step,
    overlay_deform,
    raw_velocity,
    sphere_fit,
    tangent_sphere,
    track_associate,
)
from oracles import scalar_kalman_oracle, tangent_sphere_oracle


def test_tangent_sphere_worked_example():
    est = tangent_sphere(np.zeros(3), np.array([4.0, 0, 0]), np.array([4.8, 0.98, 0]))
    assert est.radius == pytest.approx(1.0, abs=2e-3)
    np.testing.assert_allclose(est.center, [5.0, 0, 0], atol=5e-3)
    _, _, alpha = tangent_sphere_oracle([0, 0, 0], [[4.8, 0.98, 0], [3.2, -0.98, 0]])
    assert alpha == pytest.approx(math.asin(0.2), abs=1e-3)


def test_sphere_fit_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p_n = rng.uniform(-1, 1, 3)
        c = p_n + rng.uniform(2, 5) * (lambda u: u / np.linalg.norm(u))(rng.normal(size=3))
        pts = c + rng.normal(0, 0.2, (int(rng.integers(3, 40)), 3))
        est = sphere_fit(pts, p_n, eps=0.05)
        center, r, _ = tangent_sphere_oracle(p_n.tolist(), pts.tolist())
        assert not est.fallback
        np.testing.assert_allclose(est.center, center, atol=1e-6)
        reach = max(math.dist(p, center) for p in pts.tolist())
        assert est.radius == pytest.approx(max(r, reach - 0.05), abs=1e-6)


def test_sphere_fit_fallback():
    est = sphere_fit(np.array([[1.0, 0, 0], [2.0, 0, 0]]), np.zeros(3))
    assert est.fallback
    np.testing.assert_allclose(est.center, [1.5, 0, 0])
    assert est.radius == pytest.approx(0.5)
    assert sphere_fit(np.array([[1.0, 2.0, 3.0]]), np.zeros(3)).fallback
    with pytest.raises(ValueError):
        sphere_fit(np.zeros((0, 3)), np.zeros(3))


def test_sphere_fit_on_rendered_cap():
    scene = Scene("s", 1.0, 0, np.zeros(3), np.zeros(3), static=(Sphere(np.array([3.0, 0.0, 0.0]), 1.0),))
    pose = PoseState(p=(0, 0, 0), e=(0, 0, 0))
    cap = render_cloud(scene, pose, CameraModel(width=212, height=120)).xyz
    est = sphere_fit(cap, np.zeros(3), eps=0.05)
    assert np.linalg.norm(est.center - [3, 0, 0]) <= 0.15
    assert np.all(np.linalg.norm(cap - est.center, axis=1) <= est.radius + 0.05)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_sphere_fit_covers_cluster(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 0.3, (int(rng.integers(2, 30)), 3)) + [3, 0, 0]
    est = sphere_fit(pts, np.zeros(3), eps=0.05)
    assert est.radius > 0
    assert np.all(np.linalg.norm(pts - est.center, axis=1) <= est.radius + 0.05 + 1e-9)


def kalman_run(zs, dts, cfg, x0):
    Q, R, P0 = cfg.matrices()
    x, P = np.asarray(x0, dtype=float), P0
    out = []
    for z, dt in zip(zs, dts):
        x, P = kalman_step(x, P, z, dt, Q, R)
        out.append(x.copy())
    return out, P


def test_kalman_matches_scalar_oracle():
    cfg = KalmanConfig()
    rng = np.random.default_rng(1)
    for trial in range(100):
        steps = 3 if trial == 0 else int(rng.integers(2, 12))
        x0 = rng.normal(size=6)
        zs = [rng.normal(size=6) for _ in range(steps)]
        dts = rng.uniform(0.01, 0.3, steps)
        got, _ = kalman_run(zs, dts, cfg, x0)
        for axis in range(3):
            want = scalar_kalman_oracle([z[axis] for z in zs], [z[axis + 3] for z in zs], dts,
                                        (cfg.q_pos, cfg.q_vel), (cfg.r_pos, cfg.r_vel), cfg.p0,
                                        (x0[axis], x0[axis + 3]))
            for g, (wp, wv) in zip(got, want):
                assert g[axis] == pytest.approx(wp, abs=1e-9)
                assert g[axis + 3] == pytest.approx(wv, abs=1e-9)


def test_kalman_examples():
    Q, R, P0 = KalmanConfig().matrices()
    x = np.array([0, 0, 0, 1.0, 2.0, 0])
    pred, _ = kalman_step(x, P0, None, 0.5, Q, R)
    np.testing.assert_allclose(pred, [0.5, 1.0, 0, 1, 2, 0])
    upd, _ = kalman_step(x, P0, pred, 0.5, Q, R)
    np.testing.assert_allclose(upd, pred, atol=1e-12)
    with pytest.raises(ValueError):
        kalman_step(x, P0, None, 0.0, Q, R)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.005, 0.5), st.booleans()), min_size=1, max_size=30), st.integers(0, 99))
def test_kalman_covariance_stays_psd(steps, seed):
    rng = np.random.default_rng(seed)
    Q, R, P = KalmanConfig().matrices()
    x = np.zeros(6)
    for dt, observed in steps:
        x, P = kalman_step(x, P, rng.normal(size=6) if observed else None, dt, Q, R)
        np.testing.assert_allclose(P, P.T, atol=1e-12)
        assert np.linalg.eigvalsh(P).min() >= -1e-9


def test_kalman_noiseless_convergence():
    cfg = KalmanConfig(q_pos=1e-9, q_vel=1e-9)
    Q, R, P = cfg.matrices()
    v = np.array([1.0, -0.5, 0.2])
    x = np.zeros(6)
    for k in range(1, 11):
        z = np.concatenate([v * 0.2 * k, v])
        x, P = kalman_step(x, P, z, 0.2, Q, R)
    assert np.linalg.norm(x[3:] - v) <= 0.02


def test_filtered_beats_raw_on_noisy_track():
    rng = np.random.default_rng(7)
    cfg = KalmanConfig()
    Q, R, P = cfg.matrices()
    v = np.array([1.0, 0.5, 0.0])
    dt = 1 / 30
    raw_err, filt_err = [], []
    truth = lambda t: np.array([0.0, -2.0, 1.5]) + v * t  # noqa: E731
    x = None
    for k in range(6, 200):
        t2, t1 = k * dt, (k - 6) * dt
        c2 = truth(t2) + rng.normal(0, 0.05, 3)
        c1 = truth(t1) + rng.normal(0, 0.05, 3)
        vr = raw_velocity(c2, c1, t1, t2)
        z = np.concatenate([c2, vr])
        if x is None:
            x = z
            continue
        x, P = kalman_step(x, P, z, dt, Q, R)
        if k > 40:
            raw_err.append(np.sum((vr - v) ** 2))
            filt_err.append(np.sum((x[3:] - v) ** 2))
    assert math.sqrt(np.mean(filt_err)) < math.sqrt(np.mean(raw_err))


def test_raw_velocity_examples():
    np.testing.assert_allclose(raw_velocity([0.2, 0, 0], [0, 0, 0], 0.0, 0.2), [1, 0, 0])
    np.testing.assert_allclose(raw_velocity([1, 1, 1], [1, 1, 1], 0.0, 0.2), [0, 0, 0])
    np.testing.assert_allclose(raw_velocity([0.1, -0.1, 0.05], [0, 0, 0], 1.0, 1.25), [0.4, -0.4, 0.2])
    with pytest.raises(ValueError):
        raw_velocity([0, 0, 0], [0, 0, 0], 1.0, 1.0)


def test_associate_examples():
    pairs, fresh = track_associate([np.zeros(3)], [np.array([0.1, 0, 0])], 1.0)
    assert pairs == [(0, 0)] and fresh == []
    pairs, fresh = track_associate([np.zeros(3)], [np.array([5.0, 0, 0])], 1.0)
    assert pairs == [] and fresh == [0]
    # crossed: detection order is reversed relative to the tracks
    tracks = [np.array([0.0, 0, 0]), np.array([1.0, 0, 0])]
    dets = [np.array([0.9, 0.1, 0]), np.array([0.1, 0.1, 0])]
    pairs, fresh = track_associate(tracks, dets, 1.0)
    assert sorted(pairs) == [(0, 1), (1, 0)] and fresh == []


def test_associate_2x2_against_exhaustive():
    rng = np.random.default_rng(2)
    for _ in range(200):
        tracks = list(rng.uniform(0, 1, (2, 3)))
        dets = list(rng.uniform(0, 1, (2, 3)))
        pairs, fresh = track_associate(tracks, dets, 10.0)
        dist = [[math.dist(t, d) for d in dets] for t in tracks]
        # exhaustive: both matchings; greedy keeps the globally closest pair
        matchings = [((0, 0), (1, 1)), ((0, 1), (1, 0))]
        closest = min(itertools.product(range(2), range(2)), key=lambda ij: dist[ij[0]][ij[1]])
        want = next(m for m in matchings if closest in m)
        assert sorted(pairs) == sorted(want) and fresh == []


def det(center, prior, t1=0.0, t2=0.2, radius=0.3):
    return Detection(np.asarray(center, float), np.asarray(prior, float), t1, t2, radius)


def test_tracker_lifecycle():
    trk = Tracker(cfg=TrackerConfig(stale_after=0.5))
    snaps = trk.step(0.2, [det([1, 0, 0], [0.8, 0, 0])])
    assert len(snaps) == 1 and snaps[0].hits == 1 and trk.assignment == [0]
    np.testing.assert_allclose(snaps[0].velocity, [1, 0, 0])
    snaps = trk.step(0.4, [det([1.2, 0, 0], [1.0, 0, 0], 0.2, 0.4), det([5, 5, 0], [5, 4.8, 0], 0.2, 0.4)])
    assert [s.track_id for s in snaps] == [0, 1] and trk.assignment == [0, 1]
    assert snaps[0].hits == 2 and snaps[0].observed
    # prediction only between detections
    snaps = trk.step(0.5)
    assert not snaps[0].observed
    assert snaps[0].center[0] == pytest.approx(1.2 + 0.1 * snaps[0].velocity[0], abs=0.05)
    # both go stale
    assert trk.step(1.2) == []


def test_tracker_clamps_speed():
    trk = Tracker(cfg=TrackerConfig(max_speed=2.0))
    snaps = trk.step(0.2, [det([3, 0, 0], [0, 0, 0])])
    assert np.linalg.norm(snaps[0].velocity) == pytest.approx(2.0)


@pytest.mark.parametrize(
    "hits, radius, speed, want",
    [(3, 0.3, 1.0, True), (2, 0.3, 1.0, False), (3, 1.5, 1.0, False), (3, 0.3, 0.1, False), (5, 1.0, 0.3, True)],
)
def test_is_moving(hits, radius, speed, want):
    snap = TrackSnapshot(0, np.zeros(3), np.array([speed, 0, 0]), radius, 0.0, True, hits)
    assert is_moving(snap, TrackerConfig()) is want


def aligned(xyz, t, p=(0, 0, 0), e=(0, 0, 0)):
    xyz = np.asarray(xyz, float)
    return AlignedFrame(PointCloudFrame(xyz, np.full_like(xyz, 0.5), t, Frame.WORLD), np.asarray(p, float),
                        np.asarray(e, float))


def test_overlay_examples():
    pts = np.random.default_rng(0).uniform(0, 1, (10, 3))
    a = aligned(pts, 1.0, p=(0, 0, 0), e=(0, 0, math.pi - 0.1))
    b = aligned(pts, 0.9, p=(1, 0, 0), e=(0, 0, -math.pi + 0.1))
    merged = overlay_deform(a, b)
    assert len(merged.cloud) == 20 and merged.timestamp == 1.0
    np.testing.assert_allclose(merged.cloud.xyz.min(axis=0), pts.min(axis=0))
    np.testing.assert_allclose(merged.cloud.xyz.max(axis=0), pts.max(axis=0))
    np.testing.assert_allclose(merged.p_ali, [0.5, 0, 0])
    # the average of yaws either side of +-pi is pi, not 0
    assert abs(merged.e_ali[2]) == pytest.approx(math.pi)
    assert overlay_deform(a, None) is a
