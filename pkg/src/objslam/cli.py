"""Command-line driver: scenario generation, SLAM runs, evaluation.

Three subcommands:

``gen``   writes a scenario JSON (tables, placements, change events, decoys,
          camera trajectory, noise levels).
``run``   executes the frame loop on a scenario and writes the estimated
          trajectory, pose-graph dump, library checkpoint, map export, and
          the change detections.
``eval``  scores a run directory against its scenario (ATE / RPE / change
          precision-recall) into a JSON report and a per-frame CSV.

Settings are layered: built-in defaults, then an optional ``--config`` JSON
file, then explicit flags. Exit codes: 0 success, 2 configuration error,
3 runtime error (artifacts written best-effort before exiting).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .evalmetrics import MetricsReport, ate_rmse, change_pr, rpe_trans_rmse, write_trajectory_csv
from .geometry import Pose3
from .models import generate_catalog
from .pipeline import MODES, RunConfig, run_slam, write_artifacts
from .scene import (
    SceneConfig,
    TrajectoryConfig,
    generate_scene,
    generate_trajectory,
    load_scenario,
    save_scenario,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

PAPER_NOISE = {"sigma_rot": 0.003, "sigma_t": 0.05, "sigma_latent": 0.001}

# Bundled scenario presets. ``paper-synthetic`` reproduces the acceptance
# scenario: 10 tables, 50 objects, 9 changes over a two-traversal loop, with
# the standard noise levels; ``minimal`` is a one-table smoke scenario.
PRESETS = {
    "paper-synthetic": {
        "tables": 10,
        "objects": 50,
        "changes": 9,
        "decoys": 3,
        "layout": "planar",
        "laps": 2,
        **PAPER_NOISE,
    },
    "minimal": {
        "tables": 1,
        "objects": 2,
        "changes": 0,
        "decoys": 0,
        "layout": "planar",
        "laps": 2,
        "sigma_rot": 0.0,
        "sigma_t": 0.0,
        "sigma_latent": 0.0,
    },
}

GEN_DEFAULTS = {
    "tables": 4,
    "objects": 8,
    "changes": 3,
    "decoys": 1,
    "layout": "planar",
    "laps": 2,
    "sigma_rot": 0.0,
    "sigma_t": 0.0,
    "sigma_latent": 0.0,
    "seed": 0,
}

RUN_DEFAULTS = {
    "mode": "all-object",
    "window": 10,
    "seed": 0,
    "sigma_rot": None,  # None: take the scenario's stored noise
    "sigma_t": None,
    "sigma_latent": None,
}


class ConfigError(ValueError):
    pass


def _layer(defaults: dict, config_path: str | None, args: argparse.Namespace, keys) -> dict:
    out = dict(defaults)
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        unknown = set(doc) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        out.update(doc)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _catalog_for(script, seed: int):
    """Rebuild the model catalog a scenario was generated against.

    Catalog generation is prefix-stable in the model index, so the stored
    seed plus the highest referenced model index fully determine it."""
    ids = {p.model_id for p in script.placements}
    ids |= {e.model_id for e in script.events}
    ids |= {d.model_id for d in script.decoys}
    n = 1 + max(int(i[1:]) for i in ids)
    return generate_catalog(seed, n)


def _scene_config(settings: dict, n_frames: int) -> SceneConfig:
    lap_frames = n_frames // settings["laps"]
    return SceneConfig(
        n_tables=settings["tables"],
        n_objects=settings["objects"],
        n_changes=settings["changes"],
        n_decoys=settings["decoys"],
        layout=settings["layout"],
        n_frames=n_frames,
        # changes land in the window between the end of the first traversal's
        # sweep and the start of the second
        change_window=(lap_frames - 20, lap_frames - 5),
    )


def cmd_gen(args) -> int:
    defaults = dict(GEN_DEFAULTS)
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset: {args.preset!r} (have {sorted(PRESETS)})")
        defaults.update(PRESETS[args.preset])
    s = _layer(defaults, args.config, args, GEN_DEFAULTS.keys())
    if s["tables"] < 1 or s["objects"] < 1 or s["laps"] < 1:
        raise ConfigError("tables, objects, and laps must all be >= 1")
    if s["changes"] % 3 != 0:
        raise ConfigError("changes must be divisible by 3 (equal add/remove/move split)")
    if s["layout"] not in ("planar", "nonplanar"):
        raise ConfigError(f"unknown layout: {s['layout']!r}")
    trajectory = generate_trajectory(TrajectoryConfig(laps=s["laps"]))
    catalog = generate_catalog(s["seed"], s["objects"] + s["changes"] // 3)
    script = generate_scene(_scene_config(s, len(trajectory)), catalog, s["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenario(
        out, script, trajectory, s["sigma_rot"], s["sigma_t"], s["sigma_latent"], s["seed"]
    )
    print(f"wrote {out} ({s['tables']} tables, {s['objects']} objects, "
          f"{s['changes']} changes, {len(trajectory)} frames)")
    return EXIT_OK


def cmd_run(args) -> int:
    s = _layer(RUN_DEFAULTS, args.config, args, RUN_DEFAULTS.keys())
    if s["mode"] not in MODES:
        raise ConfigError(f"unknown mode: {s['mode']!r} (have {sorted(MODES)})")
    if s["window"] < 2:
        raise ConfigError("window must be >= 2")
    try:
        script, trajectory, noise, seed = load_scenario(args.scenario)
    except OSError as e:
        print(f"error: cannot read scenario: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        print(f"error: malformed scenario: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    catalog = _catalog_for(script, seed)
    config = RunConfig(
        mode=s["mode"],
        window=s["window"],
        seed=s["seed"],
        sigma_rot=noise["sigma_rot"] if s["sigma_rot"] is None else s["sigma_rot"],
        sigma_t=noise["sigma_t"] if s["sigma_t"] is None else s["sigma_t"],
        sigma_latent=noise["sigma_latent"] if s["sigma_latent"] is None else s["sigma_latent"],
    )
    result = run_slam(script, trajectory, catalog, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_artifacts(result, catalog, out)
    (out / "detections.json").write_text(
        json.dumps([{"model": m, "frame": f} for m, f in result.detections], indent=1)
    )
    print(f"wrote {out} ({len(result.keyframe_frames)} keyframes, "
          f"{len(result.detections)} change detections)")
    if result.solver_warnings:
        print(
            f"error: solver failed to converge on {result.solver_warnings} solve(s); "
            "outputs written best-effort",
            file=sys.stderr,
        )
        return EXIT_RUNTIME
    return EXIT_OK


def _read_trajectory(path: Path) -> list[Pose3]:
    poses = []
    for line in path.read_text().splitlines():
        parts = line.split()
        t = np.array([float(x) for x in parts[1:4]])
        qx, qy, qz, qw = (float(x) for x in parts[4:8])
        poses.append(Pose3.from_quaternion(np.array([qx, qy, qz, qw]), t))
    return poses


def cmd_eval(args) -> int:
    try:
        script, trajectory, _, _ = load_scenario(args.scenario)
        est = _read_trajectory(Path(args.run_dir) / "trajectory.txt")
        detections = [
            (d["model"], d["frame"])
            for d in json.loads((Path(args.run_dir) / "detections.json").read_text())
        ]
    except OSError as e:
        print(f"error: cannot read inputs: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (KeyError, ValueError, IndexError, json.JSONDecodeError) as e:
        print(f"error: malformed inputs: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if len(est) != len(trajectory):
        print(
            f"error: estimate has {len(est)} poses, scenario has {len(trajectory)}",
            file=sys.stderr,
        )
        return EXIT_RUNTIME
    a_rmse, a_series = ate_rmse(est, trajectory.poses)
    r_rmse, r_series = rpe_trans_rmse(est, trajectory.poses)
    events = [(e.model_id, e.frame_index) for e in script.events]
    tp, fp, fn, _, _ = change_pr(detections, events)
    report = MetricsReport(a_rmse, r_rmse, list(a_series), list(r_series), tp, fp, fn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    write_trajectory_csv(out / "trajectory.csv", trajectory.poses, est, report)
    print(
        f"ate_rmse {a_rmse:.6g}  rpe_rmse {r_rmse:.6g}  "
        f"changes tp={tp} fp={fp} fn={fn}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objslam",
        description="Object-level SLAM on scripted desk scenes: generate, run, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scenario file")
    g.add_argument("--out", required=True, help="output scenario JSON path")
    g.add_argument("--preset", help="named preset: " + ", ".join(sorted(PRESETS)))
    g.add_argument("--config", help="JSON file with default overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--tables", type=int)
    g.add_argument("--objects", type=int)
    g.add_argument("--changes", type=int)
    g.add_argument("--decoys", type=int)
    g.add_argument("--layout", choices=["planar", "nonplanar"])
    g.add_argument("--laps", type=int)
    g.add_argument("--sigma-rot", dest="sigma_rot", type=float)
    g.add_argument("--sigma-t", dest="sigma_t", type=float)
    g.add_argument("--sigma-latent", dest="sigma_latent", type=float)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the SLAM loop on a scenario")
    r.add_argument("--scenario", required=True, help="scenario JSON from `gen`")
    r.add_argument("--out", required=True, help="output directory for run artifacts")
    r.add_argument("--config", help="JSON file with default overrides")
    r.add_argument("--mode", choices=sorted(MODES))
    r.add_argument("--window", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--sigma-rot", dest="sigma_rot", type=float,
                   help="override the scenario's odometry rotation noise")
    r.add_argument("--sigma-t", dest="sigma_t", type=float,
                   help="override the scenario's odometry translation noise")
    r.add_argument("--sigma-latent", dest="sigma_latent", type=float,
                   help="override the scenario's latent noise")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a run directory against its scenario")
    e.add_argument("--scenario", required=True)
    e.add_argument("--run-dir", required=True, help="directory written by `run`")
    e.add_argument("--out", required=True, help="output directory for the report")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
