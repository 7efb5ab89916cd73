"""``aviate`` command line: run scenes, replay them, benchmark estimation and latency.

Exit codes: 0 success, 1 collision / abort / replay mismatch, 2 bad input,
3 estimate-bench on a scene without moving actors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .core import ConfigError, StackConfig
from .planner import PlannerState, plan_step
from .sim import Scene, run_episode
from .tracker import TrackSnapshot

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NO_ACTORS = 0, 1, 2, 3
DEFAULT_SWEEP = (500, 1000, 2000, 3000)


def summary_schema() -> dict[str, Any]:
    return json.loads(resources.files("aviate").joinpath("schemas", "summary.schema.json").read_text())


def validate_summary(summary: dict[str, Any]) -> None:
    jsonschema.validate(summary, summary_schema())


def _fail(kind: str, message: str, code: int) -> int:
    json.dump({"error": kind, "message": message}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _load(args: argparse.Namespace) -> tuple[Scene, StackConfig | None]:
    scene = Scene.load(args.scene)
    cfg = StackConfig.load(args.config) if args.config else None
    return scene, cfg


def _manifest(args: argparse.Namespace, scene: Scene) -> dict[str, Any]:
    src = args.scene
    if Path(src).exists():
        src = str(Path(src).resolve())
    return {
        "scene": src,
        "config": str(Path(args.config).resolve()) if args.config else None,
        "seed": scene.seed if args.seed is None else args.seed,
        "mode": args.mode,
        "static_only": bool(getattr(args, "static_only", False)),
        "duration": getattr(args, "duration", None),
    }


def cmd_run(args: argparse.Namespace) -> int:
    scene, cfg = _load(args)
    manifest = _manifest(args, scene)
    log = run_episode(scene, cfg, manifest["seed"], mode=args.mode, static_only=args.static_only,
                      duration=args.duration)
    summary = log.summary()
    summary["manifest"] = manifest
    validate_summary(summary)
    if args.out:
        out = Path(args.out)
        log.write(out)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({k: summary[k] for k in ("scene", "seed", "baseline", "collisions", "reached_goal",
                                              "goal_time", "min_clearance", "aborted", "fingerprint")}))
    if log.aborted:
        return _fail("aborted", log.aborted, EXIT_FAIL)
    return EXIT_FAIL if log.collision else EXIT_OK


def cmd_estimate_bench(args: argparse.Namespace) -> int:
    scene, cfg = _load(args)
    if not scene.actors:
        return _fail("no-actors", f"scene {scene.name!r} has no moving actors to estimate", EXIT_NO_ACTORS)
    cfg = scene.stack_config(cfg)
    if args.overlay is not None:
        cfg = cfg.replace(classifier={"overlay": args.overlay == "on"})
    # the scene section was folded in already; do not apply it twice
    scene = dataclasses.replace(scene, config={})
    seed = scene.seed if args.seed is None else args.seed
    log = run_episode(scene, cfg, seed, mode=args.mode, duration=args.duration, record_debug=False)
    if log.aborted:
        return _fail("aborted", log.aborted, EXIT_FAIL)
    report = {
        "scene": scene.name,
        "seed": seed,
        "overlay": cfg.classifier.overlay,
        "actors": log.estimation(),
        "pooled": log.pooled_estimation(),
    }
    report = json.loads(json.dumps(report, default=float).replace("NaN", "null"))
    text = json.dumps(report, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "estimation.json").write_text(text)
    print(text)
    return EXIT_OK


def synthetic_world(n_points: int, seed: int = 0) -> tuple[np.ndarray, list[TrackSnapshot]]:
    """A wall with a gap ahead of the origin plus five crossing obstacles.

    The wall blocks the goal direction and its neighbours, so every planning
    call runs the same handful of segment checks whatever the point count.
    """
    rng = np.random.default_rng(seed)
    if n_points:
        u = rng.uniform(size=(n_points, 2))
        y = -1.2 + 2.0 * u[:, 0]
        z = 0.5 + 2.0 * u[:, 1]
        pts = np.column_stack([np.full(n_points, 1.6) + rng.normal(0.0, 0.02, n_points), y, z])
    else:
        pts = np.zeros((0, 3))
    tracks = [
        TrackSnapshot(k, np.array([2.0 + 0.4 * k, -1.5 + 0.7 * k, 1.5]), np.array([0.0, 0.8 - 0.3 * k, 0.0]),
                      0.3, 0.0, True, 5)
        for k in range(5)
    ]
    return pts, tracks


def latency_sweep(counts: Sequence[int], iters: int = 30, n_tracks: int = 5, cfg: StackConfig | None = None,
                  seed: int = 0) -> list[dict[str, float]]:
    cfg = cfg or StackConfig()
    state = PlannerState(np.array([0.0, 0.0, 1.5]), np.array([1.0, 0.0, 0.0]), np.zeros(3),
                         np.array([8.0, 0.0, 1.5]), 0.0, cfg.timing.dt_n)
    rows = []
    for n in counts:
        pts, tracks = synthetic_world(n, seed)
        tracks = tracks[:n_tracks]
        plan_step(state, pts, tracks, cfg)  # warm caches
        samples: dict[str, list[float]] = {"static": [], "alg2": [], "solve": [], "total": []}
        for _ in range(iters):
            step = plan_step(state, pts, tracks, cfg)
            for key in samples:
                samples[key].append(step.latency_us.get(key, 0.0))
        row: dict[str, float] = {"points": n, "tracks": len(tracks), "candidates": step.candidates}
        for key, vals in samples.items():
            arr = np.asarray(vals)
            row[f"{key}_mean_us"] = float(arr.mean())
            row[f"{key}_p95_us"] = float(np.percentile(arr, 95))
        rows.append(row)
    return rows


def cmd_bench_latency(args: argparse.Namespace) -> int:
    cfg = StackConfig.load(args.config) if args.config else None
    rows = latency_sweep(args.points, args.iters, args.tracks, cfg, args.seed or 0)
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(f"{r[c]:.1f}" if isinstance(r[c], float) else str(r[c]) for c in cols)
                                for r in rows]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "latency.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    static = [r["static_mean_us"] for r in rows]
    if any(b < a for a, b in zip(static, static[1:])):
        print("warning: static-check latency is not monotone in the point count", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        summary = json.loads(Path(args.summary).read_text())
        manifest = summary["manifest"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail("bad-summary", f"{args.summary}: {exc}", EXIT_INPUT)
    if manifest["mode"] != "lockstep":
        return _fail("not-replayable", "only lockstep runs are reproducible", EXIT_INPUT)
    scene = Scene.load(manifest["scene"])
    cfg = StackConfig.load(manifest["config"]) if manifest.get("config") else None
    log = run_episode(scene, cfg, manifest["seed"], mode="lockstep", static_only=manifest["static_only"],
                      duration=manifest.get("duration"))
    got = log.fingerprint()
    same = got == summary["fingerprint"]
    print(json.dumps({"expected": summary["fingerprint"], "replayed": got, "identical": same}))
    return EXIT_OK if same else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aviate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def scene_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scene", required=True, help="scene JSON path or builtin name")
        p.add_argument("--config", help="stack config JSON (sections override defaults)")
        p.add_argument("--seed", type=int, help="noise seed (default: the scene's)")
        p.add_argument("--mode", choices=("lockstep", "realtime"), default="lockstep")
        p.add_argument("--duration", type=float, help="override the scene duration [s]")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="fly one episode and write logs")
    scene_args(p)
    p.add_argument("--static-only", action="store_true", help="treat every obstacle as static (baseline)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("estimate-bench", help="raw vs filtered estimation error per actor")
    scene_args(p)
    p.add_argument("--overlay", choices=("on", "off"), help="force the frame-overlay deformation step")
    p.set_defaults(func=cmd_estimate_bench)

    p = sub.add_parser("bench-latency", help="planner latency against static point count")
    p.add_argument("--points", type=int, nargs="+", default=list(DEFAULT_SWEEP))
    p.add_argument("--tracks", type=int, default=5, choices=range(6))
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_latency)

    p = sub.add_parser("replay", help="re-run a summary's manifest and compare fingerprints")
    p.add_argument("summary", help="summary.json written by `aviate run`")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
