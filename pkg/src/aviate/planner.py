"""Local motion planning around static points and moving spheres.

One planning step:

1. compensate the drone and obstacle positions for pipeline delays,
2. walk the heuristic angular search (HAS) directions that are clear of the
   static point memory,
3. for each clear direction run the relative-velocity check against the
   tracked moving obstacles to get a speed bound ``v_g`` (or reject it),
4. solve a single constant-acceleration motion primitive toward the
   waypoint on the accepted direction.
"""

from __future__ import annotations

import dataclasses
import math
import time
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import FloatArray, PlannerConfig, StackConfig, TimingModel, as_point, wrap_angle
from .tracker import TrackSnapshot

_EPS = 1e-12


def ag(v: FloatArray) -> tuple[float, float]:
    """Direction angles (azimuth from +X, elevation above the XY plane)."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    h = math.hypot(x, y)
    if h == 0.0 and z == 0.0:
        raise ValueError("ag() of the zero vector")
    az = math.atan2(y, x) if h > 0 else 0.0
    return wrap_angle(az), math.atan2(z, h)


def unit_from_angles(az: float, el: float) -> FloatArray:
    ce = math.cos(el)
    return np.array([ce * math.cos(az), ce * math.sin(az), math.sin(el)])


def segment_distances(p_n: FloatArray, direction: FloatArray, length: float, points: FloatArray) -> FloatArray:
    q = points - p_n
    s = np.clip(q @ direction, 0.0, length)
    return np.linalg.norm(q - s[:, None] * direction, axis=1)


def line_collision_check(
    p_n: FloatArray, direction: FloatArray, d_use: float, points: FloatArray, r_safe: float
) -> bool:
    """True when the segment of length ``d_use`` from ``p_n`` is clear.

    Only points within ``d_use`` of ``p_n`` are considered; clear means
    every such point is at least ``r_safe`` from the segment.
    """
    if d_use <= 0:
        raise ValueError("segment length must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return True
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    near = pts[np.linalg.norm(pts - p_n, axis=1) <= d_use]
    if len(near) == 0:
        return True
    return bool(segment_distances(p_n, u, d_use, near).min() >= r_safe)


@dataclass(frozen=True)
class SearchCandidate:
    direction: FloatArray
    azimuth: float
    elevation: float
    offset: float
    round: int


def has_candidates(p_n: FloatArray, goal: FloatArray, cfg: PlannerConfig) -> Iterator[SearchCandidate]:
    """All HAS directions in search order, unchecked.

    The goal direction first, then for every round k the horizontal pair at
    azimuth +/- k*step followed by the vertical pair at elevation +/- k*step.
    """
    to_goal = np.asarray(goal, dtype=np.float64) - p_n
    if np.linalg.norm(to_goal) == 0:
        raise ValueError("goal coincides with the drone position")
    az0, el0 = ag(to_goal)
    yield SearchCandidate(unit_from_angles(az0, el0), az0, el0, 0.0, 0)
    k = 1
    while k * cfg.has_step <= cfg.has_max_offset + 1e-12:
        off = k * cfg.has_step
        signs = (1.0,) if off >= math.pi - 1e-12 else (1.0, -1.0)
        for s in signs:
            az = wrap_angle(az0 + s * off)
            yield SearchCandidate(unit_from_angles(az, el0), az, el0, off, k)
        for s in (1.0, -1.0):
            el = el0 + s * off
            if abs(el) < math.pi / 2:
                yield SearchCandidate(unit_from_angles(az0, el), az0, el, off, k)
        k += 1


def has_search(
    p_n: FloatArray,
    goal: FloatArray,
    points: FloatArray,
    cfg: PlannerConfig,
    stats: dict[str, float] | None = None,
    escape: bool = False,
) -> Iterator[SearchCandidate]:
    """HAS directions whose check segment is clear of ``points``.

    ``stats['static_s']`` accumulates the time spent in segment checks.
    With ``escape`` set, points already inside ``r_safe`` of ``p_n`` only
    block directions that head towards them, so a drone that drifted too
    close can back out instead of freezing.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros((0, 3))
    if len(pts):
        dist = np.linalg.norm(pts - p_n, axis=1)
        if escape:
            inside = pts[dist < cfg.r_safe] - p_n
            pts = pts[(dist >= cfg.r_safe) & (dist <= cfg.d_use)]
        else:
            pts = pts[dist <= cfg.d_use]
    for cand in has_candidates(p_n, goal, cfg):
        t0 = time.perf_counter()
        clear = len(pts) == 0 or segment_distances(p_n, cand.direction, cfg.d_use, pts).min() >= cfg.r_safe
        if clear and len(inside):
            clear = bool((inside @ cand.direction).max() <= 0.0)
        if stats is not None:
            stats["static_s"] = stats.get("static_s", 0.0) + time.perf_counter() - t0
            stats["checked"] = stats.get("checked", 0) + 1
        if clear:
            yield cand


def perp_distance(p_n: FloatArray, c_w: FloatArray, rel_dir: FloatArray) -> float:
    """Distance from ``c_w`` to the infinite line through ``p_n`` along ``rel_dir``."""
    d = np.asarray(rel_dir, dtype=np.float64)
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        raise ValueError("relative direction must be non-zero")
    p_fi = p_n + d
    return float(np.linalg.norm(np.cross(c_w - p_n, p_fi - c_w)) / nd)


def fdrv_angles(bearing: tuple[float, float], alpha_obs: float) -> list[tuple[float, float]]:
    """Four relative-velocity directions at angular distance ``alpha_obs`` from the bearing.

    Two are rotated in azimuth at the bearing's elevation (the azimuth step
    is widened so the true angle is exactly ``alpha_obs`` off the horizon),
    two in elevation.  Directions that would cross a pole are omitted.
    """
    az, el = bearing
    ce2 = math.cos(el) ** 2
    cos_d = (math.cos(alpha_obs) - math.sin(el) ** 2) / ce2
    delta = math.acos(min(1.0, max(-1.0, cos_d)))
    out = [(wrap_angle(az + delta), el), (wrap_angle(az - delta), el)]
    for s in (1.0, -1.0):
        e = el + s * alpha_obs
        if abs(e) < math.pi / 2:
            out.append((az, e))
    return out


def angle_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(wrap_angle(a[0] - b[0]), a[1] - b[1])


def ray_clear(q: FloatArray, w: FloatArray, radius: float, tol: float = 1e-9) -> bool:
    """Does the ray along ``w`` from the origin stay ``radius`` away from ``q``?

    A ray pointing away from ``q`` (angle >= 90 deg) counts as clear.
    """
    nw = float(np.linalg.norm(w))
    if nw < _EPS or float(q @ w) <= 0.0:
        return True
    if float(np.linalg.norm(q)) <= radius:
        return False
    return float(np.linalg.norm(np.cross(q, w))) / nw >= radius - tol * max(1.0, radius)


@dataclass(frozen=True)
class FdrvSolution:
    track_id: int
    gamma: tuple[float, float]
    s_rel: float
    s_drone: float
    residual: float


@dataclass(frozen=True)
class VelocityDecision:
    v_g: float
    dynamic: bool
    solutions: tuple[FdrvSolution, ...] = ()


def solve_fdrv(
    p_n: FloatArray, speed: float, v_unit: FloatArray, track: TrackSnapshot, r_safe: float
) -> FdrvSolution | None | bool:
    """Relative-velocity check for one obstacle.

    Returns ``False`` when the obstacle does not constrain the direction,
    ``None`` when it does and no tangent solution exists, otherwise the
    solution.  The drone velocity ``s_drone * v_unit`` then makes the
    relative velocity ``s_rel * d_gamma`` tangent to the inflated sphere.
    """
    q = track.center - p_n
    rel0 = speed * v_unit - track.velocity
    big_r = track.radius + r_safe
    if float(np.linalg.norm(rel0)) < _EPS or float(q @ rel0) <= 0.0:
        return False
    if perp_distance(p_n, track.center, rel0) >= big_r:
        return False
    dist = float(np.linalg.norm(q))
    if dist <= big_r:
        return None
    alpha_obs = math.asin(big_r / dist)
    alpha0 = ag(rel0)
    gammas = fdrv_angles(ag(q), alpha_obs)
    gamma = min(gammas, key=lambda g: angle_distance(g, alpha0))
    d_gamma = np.array([math.cos(gamma[0]), math.sin(gamma[0]), math.tan(gamma[1])])
    A = np.column_stack([d_gamma, v_unit])
    sol, _, rank, _ = np.linalg.lstsq(A, track.velocity, rcond=None)
    if rank < 2:
        return None
    s_rel, s_drone = -float(sol[0]), float(sol[1])
    residual = float(np.linalg.norm(A @ sol - track.velocity))
    if residual > 1e-6 * (1.0 + float(np.linalg.norm(track.velocity))):
        return None
    if s_rel <= 1e-9 or s_drone < 0.0:
        return None
    return FdrvSolution(track.track_id, gamma, s_rel, s_drone, residual)


def relative_velocity_plan(
    p_n: FloatArray,
    v_n: FloatArray,
    v_unit: FloatArray,
    tracks: Sequence[TrackSnapshot],
    cfg: PlannerConfig,
    dt_n: float,
) -> VelocityDecision | None:
    """Speed bound along ``v_unit`` that keeps relative velocities clear of every track.

    ``None`` rejects the direction.  Without constraining tracks the bound
    is ``v_max`` and the decision is not dynamic.
    """
    p_n = as_point(p_n)
    v_n = as_point(v_n)
    u = np.asarray(v_unit, dtype=np.float64)
    speed = float(np.linalg.norm(v_n))
    budget = dt_n * cfg.a_max
    sols: list[FdrvSolution] = []
    for track in tracks:
        res = solve_fdrv(p_n, speed, u, track, cfg.r_safe)
        if res is False:
            continue
        if res is None or res.s_drone > cfg.v_max:
            return None
        if float(np.linalg.norm(u * res.s_drone - v_n)) > budget:
            return None
        sols.append(res)
    if not sols:
        return VelocityDecision(cfg.v_max, False)
    # closest speed first; it must also be clear of every other track
    for sol in sorted(sols, key=lambda s: abs(s.s_drone - speed)):
        vel = sol.s_drone * u
        if all(ray_clear(t.center - p_n, vel - t.velocity, t.radius + cfg.r_safe) for t in tracks):
            return VelocityDecision(sol.s_drone, True, tuple(sols))
    return None


# ---------------------------------------------------------------------------
# motion primitive


@dataclass(frozen=True)
class PrimitiveProblem:
    """Bounds and weights of one primitive solve (after regime selection)."""

    v_min: float
    v_max: float
    a_max: float
    t_max: float
    xi: float
    eta1: float
    eta2: float

    @classmethod
    def for_regime(cls, cfg: PlannerConfig, v_g: float, speed: float, dynamic: bool) -> PrimitiveProblem:
        if not dynamic:
            return cls(cfg.v_min, cfg.v_max, cfg.a_max, cfg.t_max, cfg.xi, cfg.eta1, 0.0)
        v_min, v_max = cfg.v_min, cfg.v_max
        if v_g < speed:
            v_max = v_g
        else:
            v_min = v_g
        return cls(v_min, v_max, cfg.a_max, cfg.t_max, math.inf, cfg.eta1, cfg.eta2)


@dataclass(frozen=True)
class MotionPrimitive:
    a: FloatArray
    t: float
    v_next: FloatArray
    p_next: FloatArray
    objective: float
    stop: bool = False
    regime: str = "static"


def primitive_terms(
    a: FloatArray, t: FloatArray, p: FloatArray, v: FloatArray, w: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """(|a|, |v_next|, |p_next - w|) for batches of (a, t)."""
    a = np.atleast_2d(a)
    t = np.atleast_1d(t)[:, None]
    v_next = v + a * t
    p_next = p + v * t + 0.5 * a * t * t
    return np.linalg.norm(a, axis=1), np.linalg.norm(v_next, axis=1), np.linalg.norm(p_next - w, axis=1)


def evaluate_primitives(
    a: FloatArray, t: FloatArray, p: FloatArray, v: FloatArray, w: FloatArray, prob: PrimitiveProblem
) -> tuple[FloatArray, np.ndarray]:
    """Objective and feasibility for batches of (a, t)."""
    t = np.atleast_1d(t)
    na, sv, miss = primitive_terms(a, t, p, v, w)
    obj = na + prob.eta1 * t + prob.eta2 * miss
    ok = (
        (t > 0)
        & (t <= prob.t_max)
        & (na <= prob.a_max)
        & (sv >= prob.v_min)
        & (sv <= prob.v_max)
        & (miss <= prob.xi)
    )
    return obj, ok


def fibonacci_sphere(n: int) -> FloatArray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5**0.5) * i
    return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


_SPHERE = fibonacci_sphere(48)
_SHELLS = np.concatenate([_SPHERE * f for f in (0.25, 0.5, 0.75, 1.0)])
_T_GRID = np.arange(1, 49) / 48.0
_FRACTIONS = np.linspace(0.0, 1.0, 11)


def _coarse_candidates(
    p: FloatArray, v: FloatArray, w: FloatArray, prob: PrimitiveProblem
) -> tuple[FloatArray, FloatArray]:
    ts = _T_GRID * prob.t_max
    c = w - p - v * ts[:, None]  # (T, 3)
    b = 2.0 * c / (ts * ts)[:, None]
    blocks = [b[:, None, :] * _FRACTIONS[None, :, None]]
    if math.isfinite(prob.xi):
        rho = (2.0 * prob.xi / (ts * ts))[:, None, None]
        nc = np.linalg.norm(c, axis=1, keepdims=True)
        c_hat = np.divide(c, nc, out=np.zeros_like(c), where=nc > 0)
        blocks.append((b - rho[:, 0] * c_hat)[:, None, :])
        blocks.append(b[:, None, :] + rho * 0.999 * _SPHERE[None])
    blocks.append(np.broadcast_to(prob.a_max * _SHELLS, (len(ts),) + _SHELLS.shape))
    # end velocities on the edges of the speed band
    for s in (prob.v_min, prob.v_max):
        if 0.0 < s < math.inf:
            blocks.append((s * _SPHERE[None] - v) / ts[:, None, None])
            blocks.append((_clamp_speed(v + b[:, None, :] * ts[:, None, None], prob) - v) / ts[:, None, None])
    speed = float(np.linalg.norm(v))
    if speed > 0:
        brake = -v / speed * np.linspace(0.0, prob.a_max, 9)[:, None]
        blocks.append(np.broadcast_to(brake, (len(ts),) + brake.shape))
    a = np.concatenate(blocks, axis=1)
    t = np.broadcast_to(ts[:, None], a.shape[:2])
    return a.reshape(-1, 3), t.reshape(-1)


def _clamp_speed(u: FloatArray, prob: PrimitiveProblem) -> FloatArray:
    """Scale velocities radially into [v_min, v_max]."""
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    target = np.clip(n, prob.v_min, prob.v_max)
    return np.where(n > 0, u * np.divide(target, n, out=np.ones_like(n), where=n > 0), u)


def _best_coarse(p, v, w, prob) -> tuple[FloatArray, float, float] | None:
    a_c, t_c = _coarse_candidates(p, v, w, prob)
    obj, ok = evaluate_primitives(a_c, t_c, p, v, w, prob)
    if not ok.any():
        return None
    i = int(np.argmin(np.where(ok, obj, np.inf)))
    return a_c[i], float(t_c[i]), float(obj[i])


def _scalar_objective(a, t, p, v, w, prob) -> float:
    """Same as :func:`evaluate_primitives` for one candidate, inf when infeasible."""
    if not 0.0 < t <= prob.t_max:
        return math.inf
    na = math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    if na > prob.a_max:
        return math.inf
    vx, vy, vz = v[0] + a[0] * t, v[1] + a[1] * t, v[2] + a[2] * t
    sv = math.sqrt(vx * vx + vy * vy + vz * vz)
    if sv < prob.v_min or sv > prob.v_max:
        return math.inf
    h = 0.5 * t * t
    dx = p[0] + v[0] * t + a[0] * h - w[0]
    dy = p[1] + v[1] * t + a[1] * h - w[1]
    dz = p[2] + v[2] * t + a[2] * h - w[2]
    miss = math.sqrt(dx * dx + dy * dy + dz * dz)
    if miss > prob.xi:
        return math.inf
    return na + prob.eta1 * t + prob.eta2 * miss


def _nelder_mead(f, x0: FloatArray, steps: FloatArray, tol: float) -> tuple[FloatArray, float]:
    simplex = np.vstack([x0] + [x0 + np.eye(4)[k] * steps[k] for k in range(4)])
    res = minimize(
        f, x0, method="Nelder-Mead", options={"initial_simplex": simplex, "maxfev": 300, "xatol": tol, "fatol": 1e-9}
    )
    return res.x, f(res.x)


def _solve_soft(p, v, w, prob) -> tuple[FloatArray, float, float] | None:
    coarse = _best_coarse(p, v, w, prob)
    if coarse is None:
        return None
    a0, t0, val0 = coarse
    pl, vl, wl = p.tolist(), v.tolist(), w.tolist()

    def f(x):
        return _scalar_objective(x[:3], x[3], pl, vl, wl, prob)

    steps = np.array([0.1 * prob.a_max] * 3 + [-0.05 * prob.t_max])
    x, val = _nelder_mead(f, np.append(a0, t0), steps, 1e-7)
    best = (x[:3], float(x[3]), val) if val < val0 else (a0, t0, val0)

    # second polish over (end velocity, t): the speed band holds by construction,
    # so the search can slide along an active speed bound
    def accel(x):
        u = _clamp_speed(x[:3], prob)
        return (u - v) / x[3] if x[3] > 0 else None

    def g(x):
        a = accel(x)
        return math.inf if a is None else _scalar_objective(a, x[3], pl, vl, wl, prob)

    a1, t1, _ = best
    steps = np.array([0.1 * max(prob.v_min, 0.5)] * 3 + [-0.05 * prob.t_max])
    x, val = _nelder_mead(g, np.append(v + a1 * t1, t1), steps, 1e-7)
    if val < best[2]:
        best = (accel(x), float(x[3]), val)
    return best


def _solve_hard(p, v, w, prob) -> tuple[FloatArray, float, float] | None:
    """Hard waypoint ball, polished in (end-point offset e, t) with |e| <= xi."""
    coarse = _best_coarse(p, v, w, prob)
    if coarse is None:
        return None
    a0, t0, val0 = coarse
    pl, vl, wl = p.tolist(), v.tolist(), w.tolist()
    c0 = w - p
    limit = prob.xi * (1 - 1e-9)

    def unpack(x):
        t = x[3]
        return [2.0 * (c0[k] - v[k] * t + x[k]) / (t * t) for k in range(3)], t

    def f(x):
        if x[3] <= 0 or math.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2) > limit:
            return math.inf
        a, t = unpack(x)
        return _scalar_objective(a, t, pl, vl, wl, prob)

    e0 = 0.5 * a0 * t0 * t0 - (c0 - v * t0)
    ne = float(np.linalg.norm(e0))
    if ne > limit:
        e0 *= limit / ne
    x0 = np.append(e0, t0)
    if not math.isfinite(f(x0)):
        return a0, t0, val0
    steps = np.array([0.3 * prob.xi] * 3 + [-0.02 * prob.t_max])
    x, val = _nelder_mead(f, x0, steps, 1e-9)
    if val < val0:
        a, t = unpack(x)
        return np.array(a), float(t), val
    return a0, t0, val0


def stop_primitive(p_n: FloatArray, v_n: FloatArray, cfg: PlannerConfig) -> MotionPrimitive:
    """Maximal deceleration toward hover."""
    speed = float(np.linalg.norm(v_n))
    if speed < 1e-9:
        a = np.zeros(3)
        t = cfg.t_max
    else:
        a = -cfg.a_max * v_n / speed
        t = min(speed / cfg.a_max, cfg.t_max)
    v_next = v_n + a * t
    p_next = p_n + v_n * t + 0.5 * a * t * t
    return MotionPrimitive(a, t, v_next, p_next, math.nan, stop=True, regime="stop")


def steer_primitive(p_n: FloatArray, v_n: FloatArray, w_p: FloatArray, cfg: PlannerConfig, horizon: float) -> MotionPrimitive:
    """Turn the velocity toward the waypoint as fast as ``a_max`` allows.

    Used when the waypoint ball cannot be reached at the current speed.  The
    target speed shrinks with the cosine of the turn angle, so sharp turns
    brake.
    """
    u = w_p - p_n
    u = u / np.linalg.norm(u)
    speed = float(np.linalg.norm(v_n))
    cos_turn = float(u @ v_n) / speed if speed > 0 else 1.0
    target = min(max(speed * max(cos_turn, 0.0), cfg.v_min), cfg.v_max)
    a = (target * u - v_n) / horizon
    na = float(np.linalg.norm(a))
    if na > cfg.a_max:
        a *= cfg.a_max / na
    v_next = v_n + a * horizon
    p_next = p_n + v_n * horizon + 0.5 * a * horizon * horizon
    return MotionPrimitive(a, horizon, v_next, p_next, math.nan, stop=False, regime="steer")


def solve_motion_primitive(
    p_n: FloatArray,
    v_n: FloatArray,
    w_p: FloatArray,
    v_g: float,
    dynamic: bool,
    cfg: PlannerConfig,
    horizon: float = 0.05,
) -> MotionPrimitive:
    """Minimise |a| + eta1*t + eta2*|p_next - w_p| over one constant-acceleration piece.

    Static regime: the end point must land within ``xi`` of the waypoint and
    the speed stays within [v_min, v_max]; if that is infeasible (a turn too
    sharp for the current speed) a steering primitive over ``horizon`` is
    returned instead.  Dynamic regime: penalty on the end point, speed bound
    set by ``v_g``; infeasible means a stop primitive.
    """
    p = as_point(p_n)
    v = as_point(v_n)
    w = as_point(w_p)
    speed = float(np.linalg.norm(v))
    prob = PrimitiveProblem.for_regime(cfg, v_g, speed, dynamic)
    if dynamic:
        sol = _solve_soft(p, v, w, prob)
        if sol is None:
            return stop_primitive(p, v, cfg)
    else:
        sol = _solve_hard(p, v, w, prob)
        if sol is None:
            if float(np.linalg.norm(w - p)) == 0.0:
                return stop_primitive(p, v, cfg)
            return steer_primitive(p, v, w, cfg, min(horizon, cfg.t_max))
    a, t, val = sol
    return MotionPrimitive(a, t, v + a * t, p + v * t + 0.5 * a * t * t, val, False, "dynamic" if dynamic else "static")


# ---------------------------------------------------------------------------
# delay compensation


def compensate_drone(p_n: FloatArray, v_n: FloatArray, a_n: FloatArray, timing: TimingModel) -> FloatArray:
    dt = timing.t_pl + timing.t_ct + timing.t_pm
    return as_point(p_n) + dt * as_point(v_n) + 0.5 * dt * dt * as_point(a_n)


def compensate_obstacle(track: TrackSnapshot, timing: TimingModel) -> FloatArray:
    dt = timing.t_pl + timing.t_ct + timing.t_pm + timing.t_dp
    return track.center + dt * track.velocity


# ---------------------------------------------------------------------------
# full step


@dataclass
class PlannerState:
    p: FloatArray
    v: FloatArray
    a: FloatArray
    goal: FloatArray
    timestamp: float = 0.0
    dt_n: float = 0.05


@dataclass(frozen=True)
class PlanStep:
    timestamp: float
    p_n: FloatArray
    v_n: FloatArray
    waypoint: FloatArray
    direction: FloatArray
    azimuth: float
    elevation: float
    v_g: float
    dynamic: bool
    primitive: MotionPrimitive
    candidates: int
    reason: str = "ok"
    latency_us: dict[str, float] = field(default_factory=dict)

    @property
    def stop(self) -> bool:
        return self.primitive.stop


def plan_step(
    state: PlannerState,
    static_points: FloatArray,
    tracks: Sequence[TrackSnapshot],
    cfg: StackConfig,
    static_only: bool = False,
) -> PlanStep:
    """One deterministic planning cycle (timings are recorded but never used)."""
    t_start = time.perf_counter()
    pc = cfg.planner
    timing = cfg.timing
    p_n = compensate_drone(state.p, state.v, state.a, timing)
    v_n = as_point(state.v)
    comp_tracks = []
    for trk in tracks:
        gap = max(0.0, state.timestamp - trk.timestamp)
        c = compensate_obstacle(trk, dataclasses.replace(timing, t_dp=gap))
        comp_tracks.append(dataclasses.replace(trk, center=c))

    goal = as_point(state.goal)
    to_goal = float(np.linalg.norm(goal - p_n))
    stats: dict[str, float] = {}
    alg2_s = 0.0
    if to_goal < 1e-6:
        prim = stop_primitive(p_n, v_n, pc)
        return PlanStep(state.timestamp, p_n, v_n, goal, np.zeros(3), 0.0, 0.0, 0.0, False, prim, 0, "at-goal",
                        {"total": (time.perf_counter() - t_start) * 1e6})

    tried = 0

    def search(escape: bool) -> tuple[SearchCandidate, VelocityDecision] | None:
        nonlocal tried, alg2_s
        for cand in has_search(p_n, goal, static_points, pc, stats, escape=escape):
            tried += 1
            t0 = time.perf_counter()
            if static_only or not comp_tracks:
                decision = VelocityDecision(pc.v_max, False)
            else:
                decision = relative_velocity_plan(p_n, v_n, cand.direction, comp_tracks, pc, state.dt_n)
            alg2_s += time.perf_counter() - t0
            if decision is not None:
                return cand, decision
        return None

    chosen = search(False)
    pts = np.asarray(static_points, dtype=np.float64).reshape(-1, 3)
    if chosen is None and len(pts) and np.linalg.norm(pts - p_n, axis=1).min() < pc.r_safe:
        chosen = search(True)

    t_solve = time.perf_counter()
    if chosen is None:
        prim = stop_primitive(p_n, v_n, pc)
        step = PlanStep(state.timestamp, p_n, v_n, p_n.copy(), np.zeros(3), 0.0, 0.0, 0.0, False, prim, tried,
                        "no-direction")
    else:
        cand, decision = chosen
        dist = min(pc.waypoint_dist, to_goal) if cand.round == 0 else pc.waypoint_dist
        w_p = p_n + cand.direction * dist
        prim = solve_motion_primitive(p_n, v_n, w_p, decision.v_g, decision.dynamic, pc, state.dt_n)
        step = PlanStep(state.timestamp, p_n, v_n, w_p, cand.direction, cand.azimuth, cand.elevation, decision.v_g,
                        decision.dynamic, prim, tried, "infeasible" if prim.stop else "ok")
    now = time.perf_counter()
    step.latency_us.update(
        static=stats.get("static_s", 0.0) * 1e6,
        alg2=alg2_s * 1e6,
        solve=(now - t_solve) * 1e6,
        total=(now - t_start) * 1e6,
    )
    return step
