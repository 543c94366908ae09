"""Deterministic multi-table scene simulator.

Generates table layouts with placed objects, a closed-loop two-traversal
camera trajectory, per-frame observations (partial clouds + oracle latents),
scripted mid-run object changes (add / remove / move), scripted "decoy"
orientation flips that mimic a mis-oriented re-detection without an actual
move, and noise-corrupted external odometry.

Everything is a pure function of (config, seed): per-frame and per-object
noise comes from dedicated SeedSequence substreams keyed by (seed, frame,
placement), so adding an object never perturbs another object's noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Pose3, so3_exp
from .models import (
    CanonicalModel,
    LatentCode,
    NoiseParams,
    oracle_encode,
)

EVENT_ADD = "add"
EVENT_REMOVE = "remove"
EVENT_MOVE = "move"


# ---------------------------------------------------------------------------
# Script / trajectory types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Table:
    center: np.ndarray  # (x, y) of the table-top center
    extents: np.ndarray  # (length_x, width_y, top_height)


@dataclass(frozen=True)
class Placement:
    """One object standing in the scene during frames [start, end)."""

    model_id: str
    pose: Pose3  # world-from-object
    start: int
    end: int
    table: int


@dataclass(frozen=True)
class ChangeEvent:
    frame_index: int
    kind: str  # EVENT_ADD | EVENT_REMOVE | EVENT_MOVE
    model_id: str
    new_pose: Pose3 | None = None


@dataclass(frozen=True)
class DecoyEvent:
    """From ``start`` on, the object's latent is emitted rotated by ``angle``
    about the vertical axis through its center — the object itself does not
    move. Mimics a consistently mis-oriented re-detection (e.g. an occluded
    mug handle)."""

    model_id: str
    start: int
    angle: float


@dataclass(frozen=True)
class SceneScript:
    tables: list[Table]
    placements: list[Placement]
    events: list[ChangeEvent]
    decoys: list[DecoyEvent]
    seed: int
    n_frames: int


@dataclass(frozen=True)
class Trajectory:
    """Ground-truth world-from-camera poses, one per frame."""

    poses: list[Pose3]

    def __len__(self) -> int:
        return len(self.poses)

    def relative(self, k: int) -> Pose3:
        """Ground-truth relative pose from frame k-1 to frame k."""
        return self.poses[k - 1].inverse() @ self.poses[k]


@dataclass(frozen=True)
class Observation:
    observation_id: str
    category: str
    ambiguous: bool
    partial: np.ndarray  # (N, 3) camera frame
    latent: LatentCode  # camera frame
    visible_count: int
    range_m: float


@dataclass(frozen=True)
class FrameObservation:
    frame_index: int
    observations: list[Observation]
    # Simulator-private ground truth per observation id (model identity and
    # true camera-frame pose). Evaluation only — never read by SLAM modules.
    truth: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OdometryStream:
    measurements: list[Pose3]  # Z_k maps frame k-1 coords from frame k, k = 1..n-1
    sigma_rot: float
    sigma_t: float


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryConfig:
    """Stadium-shaped closed loop: two straight legs between the table rows,
    rounded ends, repeated for ``laps`` traversals. The camera looks outward
    (perpendicular to travel), i.e. at the near table row on each leg."""

    laps: int = 2
    step: float = 0.13  # target meters per frame (adjusted to close the loop)
    x_min: float = 1.0
    x_max: float = 14.0
    y_legs: tuple[float, float] = (3.9, 6.1)
    cam_height: float = 1.0


@dataclass(frozen=True)
class SceneConfig:
    n_tables: int = 10
    n_objects: int = 50
    n_changes: int = 9
    layout: str = "planar"  # "planar" | "nonplanar"
    area: tuple[float, float] = (15.0, 10.0)
    table_rows: tuple[float, float] = (2.3, 7.7)
    table_extents: tuple[float, float, float] = (1.2, 0.8, 0.74)
    n_frames: int = 0  # set from the trajectory
    change_window: tuple[int, int] = (0, 0)  # frames eligible for change events
    n_decoys: int = 3
    decoy_angle: float = 1.2
    laid_fraction: float = 0.5  # nonplanar: fraction of objects laid down
    min_move_dist: float = 0.18
    max_place_retries: int = 500


@dataclass(frozen=True)
class RenderConfig:
    fov_deg: float = 70.0
    max_range: float = 5.0
    max_points: int = 500
    min_points: int = 100


# ---------------------------------------------------------------------------
# Trajectory generation
# ---------------------------------------------------------------------------


def generate_trajectory(cfg: TrajectoryConfig = TrajectoryConfig()) -> Trajectory:
    y0, y1 = cfg.y_legs
    r = (y1 - y0) / 2.0
    ymid = (y0 + y1) / 2.0
    leg = cfg.x_max - cfg.x_min
    lap_len = 2.0 * leg + 2.0 * np.pi * r
    n_per_lap = int(round(lap_len / cfg.step))
    step = lap_len / n_per_lap  # exact loop closure: lap 2 repeats lap 1 poses
    poses = []
    for i in range(cfg.laps * n_per_lap):
        s = (i % n_per_lap) * step
        if s < leg:  # leg 1: +x at y0, outward normal -y
            p = np.array([cfg.x_min + s, y0])
            n = np.array([0.0, -1.0])
        elif s < leg + np.pi * r:  # right arc
            a = (s - leg) / r  # 0..pi
            n = np.array([np.sin(a), -np.cos(a)])
            p = np.array([cfg.x_max, ymid]) + r * n
        elif s < 2 * leg + np.pi * r:  # leg 2: -x at y1, outward normal +y
            p = np.array([cfg.x_max - (s - leg - np.pi * r), y1])
            n = np.array([0.0, 1.0])
        else:  # left arc
            a = (s - 2 * leg - np.pi * r) / r
            n = np.array([-np.sin(a), np.cos(a)])
            p = np.array([cfg.x_min, ymid]) + r * n
        look = np.array([n[0], n[1], 0.0])
        down = np.array([0.0, 0.0, -1.0])
        right = np.cross(down, look)
        R = np.stack([right, down, look], axis=1)  # camera x right, y down, z forward
        t = np.array([p[0], p[1], cfg.cam_height])
        poses.append(Pose3(R, t))
    return Trajectory(poses)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _resting_pose(rng, model, table, laid: bool) -> Pose3:
    if laid:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = so3_exp(rng.uniform(0.0, np.pi) * axis)
    else:
        R = so3_exp(np.array([0.0, 0.0, rng.uniform(0.0, 2 * np.pi)]))
    z = table.extents[2] - (model.surface @ R.T)[:, 2].min()
    margin = model.bounding_radius + 0.03
    lx, ly = table.extents[0] / 2 - margin, table.extents[1] / 2 - margin
    x = table.center[0] + rng.uniform(-lx, lx)
    y = table.center[1] + rng.uniform(-ly, ly)
    return Pose3(R, np.array([x, y, z]))


def _clearance_ok(pose, model, others, models_by_id) -> bool:
    for p, m in others:
        min_sep = 0.9 * (model.bounding_radius + m.bounding_radius)
        if np.linalg.norm(pose.t - p.t) <= min_sep:
            return False
    return True


def generate_scene(cfg: SceneConfig, catalog: list[CanonicalModel], seed: int) -> SceneScript:
    """Deterministic scene script: tables, placements, change events, decoys.

    The first ``n_objects`` catalog models are placed from frame 0; the next
    ``n_adds`` models arrive via add events. Raises if packing fails within
    the retry budget."""
    if cfg.n_changes % 3 != 0:
        raise ValueError("n_changes must split evenly into add/remove/move")
    n_each = cfg.n_changes // 3
    if len(catalog) < cfg.n_objects + n_each:
        raise ValueError("catalog too small for the requested scene")
    models_by_id = {m.model_id: m for m in catalog}
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE11E]))

    n_per_row = (cfg.n_tables + 1) // 2
    tables = []
    for i in range(cfg.n_tables):
        row, col = divmod(i, n_per_row)
        x = (col + 0.5) * cfg.area[0] / n_per_row
        tables.append(Table(np.array([x, cfg.table_rows[row]]), np.asarray(cfg.table_extents)))

    def place(model, table_idx, occupied, laid):
        for _ in range(cfg.max_place_retries):
            pose = _resting_pose(rng, model, tables[table_idx], laid)
            if _clearance_ok(pose, model, occupied, models_by_id):
                return pose
        raise RuntimeError(f"packing failed for {model.model_id} on table {table_idx}")

    # Initial placements, round-robin over tables.
    placements: list[Placement] = []
    per_table: dict[int, list] = {i: [] for i in range(cfg.n_tables)}
    order = rng.permutation(cfg.n_objects)
    for j, k in enumerate(order):
        model = catalog[int(k)]
        ti = j % cfg.n_tables
        laid = cfg.layout == "nonplanar" and rng.uniform() < cfg.laid_fraction
        pose = place(model, ti, per_table[ti], laid)
        per_table[ti].append((pose, model))
        placements.append(Placement(model.model_id, pose, 0, cfg.n_frames, ti))

    # Change events: n_each removes, moves, adds, spread over the window.
    lo, hi = cfg.change_window
    if cfg.n_changes and not (0 <= lo < hi <= cfg.n_frames):
        raise ValueError("change window out of range")
    frames = [
        lo + int(round(i * (hi - 1 - lo) / max(1, cfg.n_changes - 1))) for i in range(cfg.n_changes)
    ]
    touched = rng.choice(cfg.n_objects, size=2 * n_each, replace=False)
    events: list[ChangeEvent] = []
    fi = iter(frames)
    for idx in touched[:n_each]:  # removes
        f = next(fi)
        p = placements[int(idx)]
        placements[int(idx)] = replace(p, end=f)
        events.append(ChangeEvent(f, EVENT_REMOVE, p.model_id))
    for idx in touched[n_each : 2 * n_each]:  # moves, within the same table
        f = next(fi)
        p = placements[int(idx)]
        model = models_by_id[p.model_id]
        per_table[p.table] = [(q, m) for q, m in per_table[p.table] if m.model_id != p.model_id]
        for _ in range(cfg.max_place_retries):
            new_pose = _resting_pose(rng, model, tables[p.table], laid=False)
            if (
                np.linalg.norm(new_pose.t - p.pose.t) >= cfg.min_move_dist
                and _clearance_ok(new_pose, model, per_table[p.table], models_by_id)
            ):
                break
        else:
            raise RuntimeError(f"move packing failed for {p.model_id}")
        per_table[p.table].append((new_pose, model))
        placements[int(idx)] = replace(p, end=f)
        placements.append(Placement(p.model_id, new_pose, f, cfg.n_frames, p.table))
        events.append(ChangeEvent(f, EVENT_MOVE, p.model_id, new_pose))
    for j in range(n_each):  # adds, from the spare catalog tail
        f = next(fi)
        model = catalog[cfg.n_objects + j]
        ti = int(rng.integers(cfg.n_tables))
        pose = place(model, ti, per_table[ti], laid=False)
        per_table[ti].append((pose, model))
        placements.append(Placement(model.model_id, pose, f, cfg.n_frames, ti))
        events.append(ChangeEvent(f, EVENT_ADD, model.model_id, pose))

    # Decoys: persistent unambiguous objects that were not touched by events.
    touched_ids = {e.model_id for e in events}
    decoys = []
    for p in placements:
        if len(decoys) == cfg.n_decoys:
            break
        m = models_by_id[p.model_id]
        if p.start == 0 and p.end == cfg.n_frames and not m.ambiguous and p.model_id not in touched_ids:
            decoys.append(DecoyEvent(p.model_id, hi, cfg.decoy_angle))

    events.sort(key=lambda e: (e.frame_index, e.kind, e.model_id))
    return SceneScript(tables, placements, events, decoys, int(seed), cfg.n_frames)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _subsample(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic even-stride subsample to at most k points."""
    n = points.shape[0]
    if n <= k:
        return points
    idx = np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))
    return points[idx]


def render_frame(
    script: SceneScript,
    trajectory: Trajectory,
    catalog: list[CanonicalModel] | dict[str, CanonicalModel],
    frame_index: int,
    render: RenderConfig = RenderConfig(),
    noise: NoiseParams = NoiseParams(),
    seed: int = 0,
) -> FrameObservation:
    """Observations of every object visible at ``frame_index``.

    Visibility: object center inside the camera frustum (cone of the given
    FOV about +z) and within range; partial cloud from center-outward
    hemisphere culling, stride-subsampled; observations below the visible
    point gate are dropped (the weak-detection filter)."""
    if not (0 <= frame_index < len(trajectory)):
        raise ValueError("frame index out of range")
    models = catalog if isinstance(catalog, dict) else {m.model_id: m for m in catalog}
    cam = trajectory.poses[frame_index]
    cam_inv = cam.inverse()
    cos_half = np.cos(np.deg2rad(render.fov_deg) / 2.0)
    decoy_by_id = {d.model_id: d for d in script.decoys}
    obs: list[Observation] = []
    truth: dict[str, dict] = {}
    for pi, pl in enumerate(script.placements):
        if not (pl.start <= frame_index < pl.end):
            continue
        model = models[pl.model_id]
        T_co = cam_inv @ pl.pose  # camera-from-object
        c = T_co.t
        rng_range = float(np.linalg.norm(c))
        if rng_range > render.max_range or rng_range == 0.0:
            continue
        if c[2] / rng_range < cos_half:
            continue
        pts = T_co.apply(model.surface)
        keep = (pts - c) @ (-c) > 0.0
        visible = int(keep.sum())
        if visible < render.min_points:
            continue
        partial = _subsample(pts[keep], render.max_points)
        oid = f"f{frame_index}:o{pi}"
        decoy = decoy_by_id.get(pl.model_id)
        pose_for_latent = T_co
        if decoy is not None and frame_index >= decoy.start:
            # Emit the latent as if the object stood rotated about its own
            # vertical axis: a consistent mis-orientation, center unchanged.
            spin = Pose3(so3_exp(np.array([0.0, 0.0, decoy.angle])), np.zeros(3))
            pose_for_latent = T_co @ spin
        rng = None
        if noise.sigma_latent > 0.0:
            rng = np.random.default_rng(np.random.SeedSequence([script.seed, frame_index, pi, 0x0B5]))
        z = oracle_encode(
            partial,
            pose_for_latent,
            model,
            noise=noise,
            rng=rng,
            frame=f"camera:{frame_index}",
            observation_id=oid,
            visible_fraction=visible / model.surface.shape[0],
        )
        obs.append(
            Observation(oid, model.category, model.ambiguous, partial, z, visible, rng_range)
        )
        truth[oid] = {"model_id": pl.model_id, "placement": pi, "pose_cam": T_co}
    return FrameObservation(frame_index, obs, truth)


def corrupt_odometry(
    trajectory: Trajectory, sigma_rot: float, sigma_t: float, seed: int
) -> OdometryStream:
    """Relative-pose measurements Z_k = exp(eps_k) * gt_rel_k with
    eps ~ N(0, diag(sigma_rot^2 I3, sigma_t^2 I3)), one substream per step."""
    if sigma_rot < 0 or sigma_t < 0:
        raise ValueError("negative noise sigma")
    meas = []
    for k in range(1, len(trajectory)):
        gt = trajectory.relative(k)
        if sigma_rot == 0.0 and sigma_t == 0.0:
            meas.append(gt)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k, 0x0D0]))
        eps = np.concatenate(
            [rng.normal(scale=sigma_rot, size=3), rng.normal(scale=sigma_t, size=3)]
        )
        meas.append(Pose3.exp(eps) @ gt)
    return OdometryStream(meas, sigma_rot, sigma_t)


def dead_reckon(start: Pose3, odometry: OdometryStream) -> list[Pose3]:
    """Integrate odometry from a known start pose."""
    poses = [start]
    for Z in odometry.measurements:
        poses.append(poses[-1] @ Z)
    return poses


# ---------------------------------------------------------------------------
# Scenario serialization
# ---------------------------------------------------------------------------


def _pose_to_json(p: Pose3) -> dict:
    return {"R": p.R.tolist(), "t": p.t.tolist()}


def _pose_from_json(d: dict) -> Pose3:
    return Pose3(np.asarray(d["R"], float), np.asarray(d["t"], float))


def save_scenario(
    path: str | Path,
    script: SceneScript,
    trajectory: Trajectory,
    sigma_rot: float,
    sigma_t: float,
    sigma_latent: float,
    seed: int,
) -> None:
    doc = {
        "seed": int(seed),
        "noise": {"sigma_rot": sigma_rot, "sigma_t": sigma_t, "sigma_latent": sigma_latent},
        "script": {
            "seed": script.seed,
            "n_frames": script.n_frames,
            "tables": [
                {"center": t.center.tolist(), "extents": t.extents.tolist()} for t in script.tables
            ],
            "placements": [
                {
                    "model_id": p.model_id,
                    "pose": _pose_to_json(p.pose),
                    "start": p.start,
                    "end": p.end,
                    "table": p.table,
                }
                for p in script.placements
            ],
            "events": [
                {
                    "frame_index": e.frame_index,
                    "kind": e.kind,
                    "model_id": e.model_id,
                    "new_pose": None if e.new_pose is None else _pose_to_json(e.new_pose),
                }
                for e in script.events
            ],
            "decoys": [
                {"model_id": d.model_id, "start": d.start, "angle": d.angle} for d in script.decoys
            ],
        },
        "trajectory": [_pose_to_json(p) for p in trajectory.poses],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_scenario(path: str | Path):
    doc = json.loads(Path(path).read_text())
    s = doc["script"]
    script = SceneScript(
        tables=[Table(np.asarray(t["center"], float), np.asarray(t["extents"], float)) for t in s["tables"]],
        placements=[
            Placement(p["model_id"], _pose_from_json(p["pose"]), p["start"], p["end"], p["table"])
            for p in s["placements"]
        ],
        events=[
            ChangeEvent(
                e["frame_index"],
                e["kind"],
                e["model_id"],
                None if e["new_pose"] is None else _pose_from_json(e["new_pose"]),
            )
            for e in s["events"]
        ],
        decoys=[DecoyEvent(d["model_id"], d["start"], d["angle"]) for d in s["decoys"]],
        seed=s["seed"],
        n_frames=s["n_frames"],
    )
    trajectory = Trajectory([_pose_from_json(p) for p in doc["trajectory"]])
    noise = doc["noise"]
    return script, trajectory, noise, doc["seed"]


__all__ = [
    "ChangeEvent",
    "DecoyEvent",
    "FrameObservation",
    "Observation",
    "OdometryStream",
    "Placement",
    "RenderConfig",
    "SceneConfig",
    "SceneScript",
    "Table",
    "Trajectory",
    "TrajectoryConfig",
    "corrupt_odometry",
    "dead_reckon",
    "generate_scene",
    "generate_trajectory",
    "load_scenario",
    "render_frame",
    "save_scenario",
    "EVENT_ADD",
    "EVENT_MOVE",
    "EVENT_REMOVE",
]
