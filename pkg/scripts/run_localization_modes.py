#!/usr/bin/env python3
"""Localization comparison across modes: median-of-N ATE for mug-only,
all-object, and fused, against dead-reckoned odometry, on the planar and
non-planar presets with standard noise.

Usage: python3 scripts/run_localization_modes.py [--seeds 5] [--out results.json]
"""

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from objslam.evalmetrics import ate_rmse
from objslam.models import generate_catalog
from objslam.pipeline import MODES, RunConfig, run_slam
from objslam.scene import (
    SceneConfig,
    TrajectoryConfig,
    corrupt_odometry,
    dead_reckon,
    generate_scene,
    generate_trajectory,
)

NOISE = {"sigma_rot": 0.003, "sigma_t": 0.05, "sigma_latent": 0.001}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--scenario-seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    catalog = generate_catalog(args.scenario_seed, 53)
    trajectory = generate_trajectory(TrajectoryConfig(laps=2))
    lap = len(trajectory) // 2
    results = {}
    for layout in ("planar", "nonplanar"):
        cfg = SceneConfig(
            layout=layout, n_frames=len(trajectory), change_window=(lap - 20, lap - 5)
        )
        script = generate_scene(cfg, catalog, args.scenario_seed)
        results[layout] = {}
        for mode in sorted(MODES):
            ates = []
            for seed in range(args.seeds):
                t0 = time.time()
                run = run_slam(
                    script, trajectory, catalog, RunConfig(mode=mode, seed=seed, **NOISE)
                )
                ate, _ = ate_rmse(run.estimate, trajectory.poses)
                ates.append(ate)
                print(f"{layout:9s} {mode:11s} seed {seed}: ATE {ate:.4f}  "
                      f"({time.time() - t0:.0f}s)")
            results[layout][mode] = {"ates": ates, "median": statistics.median(ates)}
        dr = []
        for seed in range(args.seeds):
            odo = corrupt_odometry(trajectory, NOISE["sigma_rot"], NOISE["sigma_t"], seed)
            ate, _ = ate_rmse(dead_reckon(trajectory.poses[0], odo), trajectory.poses)
            dr.append(ate)
        results[layout]["dead-reckoned"] = {"ates": dr, "median": statistics.median(dr)}

    print("\nmedian ATE RMSE [m]")
    header = ["layout"] + sorted(MODES) + ["dead-reckoned"]
    print("  ".join(f"{h:>13s}" for h in header))
    for layout, row in results.items():
        cells = [f"{layout:>13s}"] + [
            f"{row[m]['median']:13.4f}" for m in sorted(MODES) + ["dead-reckoned"]
        ]
        print("  ".join(cells))
    for layout, row in results.items():
        ratio = row["all-object"]["median"] / row["mug-only"]["median"]
        fused = row["fused"]["median"] / row["dead-reckoned"]["median"]
        print(f"{layout}: all-object/mug-only = {ratio:.3f}, fused/dead-reckoned = {fused:.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=1))
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
