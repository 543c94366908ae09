"""Frame-by-frame SLAM loop tying the simulator, association, pose graph,
and object map together.

Modes mirror the localization experiment variants: ``mug-only`` uses only
unambiguous objects, ``all-object`` uses every category, and ``fused``
additionally consumes the external odometry stream as graph edges. In the
objects-only modes the corrupted odometry is consulted only on frames with
zero usable associations (bridging) and on keyframe pairs that latent
constraints left unconnected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .association import (
    PROV_LONE_AMBIGUOUS,
    PROV_RESOLVED_PAIR,
    AssociationResult,
    LibraryView,
    Thresholds,
    associate_frame,
)
from .geometry import Pose3
from .mapping import (
    ObjectLibrary,
    ProvisionalTracker,
    detect_changes,
    export_map,
    maintain_map,
    mark_removed,
)
from .models import CanonicalModel, NoiseParams, cosine_similarity, shape_descriptor
from .posegraph import (
    EDGE_ODOM,
    PoseGraph,
    PoseGraphEdge,
    odometry_weight,
)
from .scene import RenderConfig, SceneScript, Trajectory, corrupt_odometry, render_frame

MODE_MUG_ONLY = "mug-only"
MODE_ALL_OBJECT = "all-object"
MODE_FUSED = "fused"
MODES = (MODE_MUG_ONLY, MODE_ALL_OBJECT, MODE_FUSED)

# A latent-derived pose candidate whose implied camera rotation jumps this far
# from the previous frame's estimate is a mis-oriented re-detection (e.g. an
# occluded-handle mug), not camera motion: rotational odometry drift is tiny.
MAX_ROTATION_JUMP = 0.5  # rad

# Loop-closure measurements whose rotation disagrees this much with the
# current estimates are rejected for the same reason.
MAX_LOOP_ROTATION_DISCREPANCY = 0.5  # rad

# A re-detection counts as a new observable period (loop closure) after this
# many frames out of view.
PERIOD_GAP_FRAMES = 30

# An instantiation counts as a detected scene *addition* only when the spot
# was already covered during an earlier visit (not the current approach).
ADDITION_REVISIT_GAP = 50  # frames

# Frustum-coverage range for removal evidence and addition attribution;
# comfortably inside the sensor range so a present object would have produced
# an observation.
COVERAGE_RANGE = 3.0  # m

# Reference objects for the change-detection graph comparison may come from
# recent frames, not just the current one: their centers are re-derived from
# the pose graph, so they stay consistent across global corrections. Without
# this memory a moved object covisible only with (say) a spinning decoy would
# never accumulate the anchors needed for a verdict.
ANCHOR_MEMORY_FRAMES = 120


@dataclass(frozen=True)
class RunConfig:
    mode: str = MODE_FUSED
    thresholds: Thresholds = Thresholds()
    window: int = 10
    sigma_rot: float = 0.0
    sigma_t: float = 0.0
    sigma_latent: float = 0.0
    seed: int = 0
    render: RenderConfig = RenderConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode}")
        if self.window < 2:
            raise ValueError("window must be >= 2")


@dataclass
class RunResult:
    estimate: list[Pose3]
    graph: PoseGraph
    library: ObjectLibrary
    detections: list[tuple[str, int]]  # (model key, frame index) change reports
    keyframe_frames: list[int]
    maintenance: dict = field(default_factory=dict)
    solver_warnings: int = 0


def best_model_key(descriptor: np.ndarray, catalog: list[CanonicalModel]) -> str:
    best, best_c = None, -np.inf
    for m in catalog:
        d = m.descriptor()
        if d.shape != descriptor.shape:
            continue
        c = cosine_similarity(descriptor, d)
        if c > best_c:
            best, best_c = m.model_id, c
    if best is None:
        raise ValueError("no catalog model with a matching descriptor size")
    return best


def _fuse(candidates: list[tuple[Pose3, float]]) -> Pose3:
    """Information-weighted tangent-space mean of pose candidates."""
    base = candidates[0][0]
    if len(candidates) == 1:
        return base
    num = np.zeros(6)
    den = 0.0
    for T, w in candidates:
        num += w * (base.inverse() @ T).log()
        den += w
    return base @ Pose3.exp(num / den)


def _in_coverage(pose: Pose3, center: np.ndarray, fov_deg: float, max_range: float) -> bool:
    p = pose.inverse().apply(center)
    r = np.linalg.norm(p)
    if r > max_range or p[2] <= 0:
        return False
    return np.arccos(np.clip(p[2] / r, -1, 1)) <= np.deg2rad(fov_deg) / 2


class SlamRunner:
    def __init__(self, script: SceneScript, trajectory: Trajectory, catalog: list[CanonicalModel], config: RunConfig):
        self.script = script
        self.trajectory = trajectory
        self.catalog = catalog
        self.config = config
        self.library = ObjectLibrary()
        self.graph = PoseGraph()
        self.tracker = ProvisionalTracker(min_points=config.render.min_points)
        self.odometry = corrupt_odometry(trajectory, config.sigma_rot, config.sigma_t, config.seed)
        self.noise = NoiseParams(sigma_latent=config.sigma_latent)
        self.estimate: list[Pose3] = []
        self.anchored: list[tuple[int | None, Pose3]] = []  # (kf id, kf->frame offset)
        self.detections: list[tuple[str, int]] = []
        self.keyframe_frames: list[int] = []
        self.periods: dict[int, list[tuple[int, int]]] = {}  # object -> kf-id periods
        self.kf_frame: dict[int, int] = {}  # kf id -> frame index
        self.first_loop_frame: int | None = None
        self.solver_warnings = 0
        self._odom_dist = 0.0
        self._odom_acc = Pose3.identity()
        self._pending_changes: list[tuple[int, object]] = []
        self._anchor_cache: dict[int, tuple[int, np.ndarray]] = {}  # rec id -> (frame, centroid in camera)
        self._last_match_frame = 0  # last frame with a usable association
        self._no_fold: set[int] = set()  # position-unverified matches this frame
        self._flag_streak: tuple[int, set[int]] = (-1, set())  # last flagged frame, records
        self._established: set[int] = set()  # records position-verified at a trusted frame

    # -- helpers -------------------------------------------------------------

    def _registry(self) -> dict[int, Pose3]:
        return {k: kf.pose for k, kf in self.graph.keyframes.items()}

    def _library_views(self) -> list[LibraryView]:
        views = []
        for rec in sorted(self.library.live(), key=lambda r: r.object_id):
            if rec.last_partial is None or not rec.observations:
                continue
            views.append(
                LibraryView(
                    rec.object_id,
                    rec.descriptor,
                    rec.ambiguous,
                    rec.last_keyframe_id,
                    rec.observations[-1][1],
                    rec.observations[-1][1].centroid(),
                )
            )
        return views

    def _covers(self, frame: int, center: np.ndarray) -> bool:
        if frame >= len(self.estimate):
            return False
        return _in_coverage(
            self.estimate[frame], center, self.config.render.fov_deg, COVERAGE_RANGE
        )

    def _record_shape_matches(self, observations, frame: int) -> None:
        """Removal evidence: any descriptor-gate hit counts as a shape match,
        independent of the proximity/consensus outcome."""
        thr = self.config.thresholds.delta_shape
        for rec in self.library.live():
            for o in observations:
                d = shape_descriptor(o.latent)
                if d.shape == rec.descriptor.shape and cosine_similarity(d, rec.descriptor) >= thr:
                    rec.matched_frames.add(frame)
                    break

    # -- per-frame steps -----------------------------------------------------

    def _verify_lone_ambiguous(self, frame, res, observations, pose, trusted):
        """A lone ambiguous object's self-alignment is position-blind (it maps
        the observation onto the library latent by construction), so such a
        match says nothing about whether the object moved. Its centroid under
        the camera pose must land on the record's mapped center: within the
        association radius when the pose was corrected this frame, or within
        the dead-reckoning drift envelope otherwise. Matches beyond the
        envelope are demoted to unmatched; matches that pass only the loose
        envelope stay matched for tracking but are position-unverified and
        must not write to the library (returned in the second element)."""
        suspects = [m for m in res.matched if m.provenance == PROV_LONE_AMBIGUOUS]
        if not suspects:
            return res, set()
        by_id = {o.observation_id: o for o in observations}
        tight = 2.0 * self.config.thresholds.delta_prox
        if trusted:
            tol = tight
        else:
            k = max(1, frame - self._last_match_frame)
            tol = max(tight, 6.0 * self.config.sigma_t * np.sqrt(k))
        demoted = []
        unverified = set()
        for m in suspects:
            rec = self.library.records[m.object_id]
            center = pose.apply(by_id[m.observation_id].latent.centroid())
            d = np.linalg.norm(center - rec.world_latent.centroid())
            if d > tol:
                demoted.append(m)
            elif not trusted or d > tight:
                unverified.add(m.object_id)
        if not demoted:
            return res, unverified
        res = AssociationResult(
            [m for m in res.matched if m not in demoted],
            list(res.unmatched) + [m.observation_id for m in demoted],
            list(res.new),
        )
        return res, unverified

    def _estimate_pose(self, frame, matches, registry, prediction):
        usable = []
        rejected = []
        prev = self.estimate[frame - 1] if frame else self.trajectory.poses[0]
        for m in matches:
            if m.provenance == PROV_LONE_AMBIGUOUS:
                continue
            if m.keyframe_id not in registry:
                continue
            cand = registry[m.keyframe_id] @ m.transform
            if frame and (prev.inverse() @ cand).rotation_angle() > MAX_ROTATION_JUMP:
                rejected.append(m)
                continue
            usable.append((m, cand))
        # A sole match has no consensus peers, so its self-derived transform
        # would absorb any object motion undetected; validate it against the
        # odometry prediction instead (validation only — the prediction does
        # not enter the pose estimate in objects-only modes). A frame whose
        # candidates all come from pair resolutions is just as fragile: a
        # two-object pair of axially symmetric shapes retains a near-rotation
        # about the line through their centers, so its members can agree on a
        # common wrong pose and must not confirm each other.
        sole_source = len(usable) == 1 or (
            usable and all(m.provenance == PROV_RESOLVED_PAIR for m, _ in usable)
        )
        if sole_source and prediction is not None and frame:
            fused = _fuse([(c, 1.0) for _, c in usable])
            d = prediction.inverse() @ fused
            # The prediction itself drifts while no objects are in view, so
            # the gates widen with the dead-reckoned stretch since the last
            # accepted association.
            k = max(1, frame - self._last_match_frame)
            gate_t = max(0.15, 6.0 * self.config.sigma_t * np.sqrt(k))
            gate_r = max(0.05, 6.0 * self.config.sigma_rot * np.sqrt(k))
            if np.linalg.norm(d.t) > gate_t or d.rotation_angle() > gate_r:
                rejected.extend(m for m, _ in usable)
                usable = []
        w_lat = 1.0 / (self.config.sigma_latent**2 + 1e-6)
        w_odo = 1.0 / (self.config.sigma_t**2 + 1e-6)
        cands = [(c, w_lat) for _, c in usable]
        if self.config.mode == MODE_FUSED and prediction is not None:
            cands.append((prediction, w_odo))
        if not cands:
            pose = prediction if prediction is not None else self.trajectory.poses[0]
        else:
            pose = _fuse(cands)
        return pose, usable, rejected

    def _change_detection(self, frame, pose, observations, matched, unmatched_ids):
        # Query centers are only as good as this frame's pose: it is
        # dead-reckoned from the last frame with a usable association
        # (lone-ambiguous matches do not correct it), and once that drift
        # rivals the consistency gate a verdict would be noise.
        k = frame - self._last_match_frame
        if self.config.sigma_t * np.sqrt(k) > 0.5 * self.config.thresholds.delta_e:
            return False
        by_id = {o.observation_id: o for o in observations}
        matched_rec = {m.object_id for m in matched}
        queries = []
        qrec = {}
        thr = self.config.thresholds.delta_shape
        for oid in sorted(unmatched_ids):
            o = by_id[oid]
            d = shape_descriptor(o.latent)
            best, best_c = None, -np.inf
            for rec in sorted(self.library.live(), key=lambda r: r.object_id):
                if rec.object_id in matched_rec or rec.descriptor.shape != d.shape:
                    continue
                c = cosine_similarity(d, rec.descriptor)
                if c >= thr and c > best_c:
                    best, best_c = rec, c
            if best is None or best.object_id not in self._established:
                # A record whose position was never confirmed at a trusted
                # frame cannot serve as the "before" of a move verdict.
                continue
            queries.append((oid, pose.apply(o.latent.centroid()), best.world_latent.centroid()))
            qrec[oid] = best
        if not queries:
            return False
        suspect = {r.object_id for r in qrec.values()}
        anchors = []
        for rec_id in sorted(self._anchor_cache):
            f, centroid = self._anchor_cache[rec_id]
            rec = self.library.records.get(rec_id)
            if rec is None or rec.removed or rec_id in suspect:
                continue
            if frame - f > ANCHOR_MEMORY_FRAMES or f < (rec.changed_at or 0):
                continue
            if f == frame:
                cam = pose
            else:
                kf_id, rel = self.anchored[f]
                base = rel if kf_id is None else self.graph.keyframes[kf_id].pose @ rel
                cam = base
            anchors.append((cam.apply(centroid), rec.world_latent.centroid()))
        verdicts = detect_changes(queries, anchors, self.config.thresholds.delta_e)
        if verdicts is None:
            return False  # no anchors this frame; evidence will recur
        # A genuine move keeps failing the layout test until the record is
        # re-homed, while a single-frame inconsistency (the pose graph one
        # local solve behind a fresh correction) clears immediately — so a
        # record must be flagged on two consecutive frames to pend a change.
        prev_frame, prev_flags = self._flag_streak
        flagged = set()
        changed = False
        for oid, is_changed in sorted(verdicts.items()):
            if not is_changed:
                continue
            rec_id = qrec[oid].object_id
            flagged.add(rec_id)
            if prev_frame == frame - 1 and rec_id in prev_flags:
                self._pending_changes.append((rec_id, by_id[oid]))
                changed = True
        self._flag_streak = (frame, flagged)
        return changed

    def _update_periods(self, kf_id: int, object_ids: list[int]) -> list[int]:
        redetected = []
        f = self.kf_frame[kf_id]
        for oid in sorted(object_ids):
            ps = self.periods.setdefault(oid, [])
            if not ps:
                ps.append((kf_id, kf_id))
                continue
            s, e = ps[-1]
            if f - self.kf_frame[e] > PERIOD_GAP_FRAMES:
                ps.append((kf_id, kf_id))
                redetected.append(oid)
            else:
                ps[-1] = (s, kf_id)
        return redetected

    def _handle_keyframe(self, frame, kf, observations, matched, new_ready):
        by_id = {o.observation_id: o for o in observations}
        registry = self._registry()
        # confirmed moves: re-home their records at this keyframe
        pending, self._pending_changes = self._pending_changes, []
        for rec_id, o in pending:
            rec = self.library.records.get(rec_id)
            if rec is None or rec.removed:
                continue
            if rec.changed_at is not None and frame - rec.changed_at <= PERIOD_GAP_FRAMES:
                continue  # same change epoch, already re-homed and reported
            self.library.mark_changed(rec_id, frame, o.latent, kf.kf_id, kf.pose, o.partial)
            # Observable periods recorded before the move would pair old-spot
            # keyframes with new-spot ones as loop closures; start fresh.
            self.periods.pop(rec_id, None)
            self.detections.append((rec.model_key, frame))
            kf.latents[rec_id] = o.latent
            kf.ambiguous[rec_id] = rec.ambiguous
        # matched objects: fold into world means, refresh last-seen state.
        # Position-unverified matches keep feeding relative keyframe evidence
        # but may not touch the mapped geometry.
        for m in sorted(matched, key=lambda m: m.object_id):
            o = by_id[m.observation_id]
            if m.object_id not in self._no_fold:
                self.library.update_world_latent(
                    m.object_id, o.latent, kf.kf_id, frame, kf.pose, registry, o.partial
                )
                if self._last_match_frame == frame:
                    self._established.add(m.object_id)
            kf.latents[m.object_id] = o.latent
            kf.ambiguous[m.object_id] = self.library.records[m.object_id].ambiguous
        # brand-new objects that passed the instantiation gates
        for o in sorted(new_ready, key=lambda o: o.observation_id):
            desc = shape_descriptor(o.latent)
            rec = self.library.instantiate(
                o.category, best_model_key(desc, self.catalog), o.ambiguous,
                o.latent, o.partial, kf.kf_id, frame, kf.pose,
            )
            kf.latents[rec.object_id] = o.latent
            kf.ambiguous[rec.object_id] = rec.ambiguous
            if self._last_match_frame == frame:
                self._established.add(rec.object_id)
            center = kf.pose.apply(o.latent.centroid())
            if any(
                self._covers(f, center)
                for f in range(0, max(0, frame - ADDITION_REVISIT_GAP))
            ):
                self.detections.append((rec.model_key, frame))

        # graph constraints
        sigma_latent = self.config.sigma_latent
        local = self.graph.build_local_constraints(kf.kf_id, self.config.window, sigma_latent)
        for e in local:
            self.graph.add_edge(e)
        prev_ids = [k for k in self.graph.kf_ids if k < kf.kf_id]
        if prev_ids:
            need_odom = self.config.mode == MODE_FUSED or not any(
                e.j == kf.kf_id for e in local
            )
            if need_odom:
                self.graph.add_edge(
                    PoseGraphEdge(
                        prev_ids[-1],
                        kf.kf_id,
                        self._odom_acc,
                        EDGE_ODOM,
                        odometry_weight(self.config.sigma_rot, self.config.sigma_t),
                    )
                )
        self._odom_acc = Pose3.identity()
        info = self.graph.optimize_local(self.config.window)
        if not info.converged:
            self.solver_warnings += 1
        # World latents are derived views of the registry; a local solve moves
        # keyframes, and records not matched this frame would otherwise keep
        # centers computed from the pre-solve poses.
        self.library.recompute_world_latents(self._registry())

        # loop closures
        redetected = self._update_periods(kf.kf_id, list(kf.latents))
        added_loop = False
        if redetected:
            loops = self.graph.build_loop_constraints(
                kf.kf_id, self.periods, redetected, sigma_latent
            )
            registry = self._registry()
            for e in loops:
                expect = registry[e.i].inverse() @ registry[e.j]
                if (e.Z.inverse() @ expect).rotation_angle() > MAX_LOOP_ROTATION_DISCREPANCY:
                    continue
                self.graph.add_edge(e)
                added_loop = True
        if added_loop:
            info = self.graph.optimize_global()
            if not info.converged:
                self.solver_warnings += 1
            self.library.recompute_world_latents(self._registry())
            if self.first_loop_frame is None:
                self.first_loop_frame = frame
        # Removal is judged only once the revisit periods are complete (end of
        # run): a moved object's old spot is often swept a few frames before
        # its new spot enters the view cone, and deciding mid-sweep would
        # misread that move as a removal plus an addition.

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.config
        n = len(self.trajectory)
        for frame in range(n):
            if frame == 0:
                prediction = self.trajectory.poses[0]
            else:
                Z = self.odometry.measurements[frame - 1]
                self._odom_dist += float(np.linalg.norm(Z.t))
                self._odom_acc = self._odom_acc @ Z
                prediction = self.estimate[frame - 1] @ Z

            fo = render_frame(
                self.script, self.trajectory, self.catalog, frame,
                noise=self.noise, seed=cfg.seed, render=cfg.render,
            )
            observations = [
                o for o in fo.observations if cfg.mode != MODE_MUG_ONLY or not o.ambiguous
            ]
            self._record_shape_matches(observations, frame)
            registry = self._registry()
            res = associate_frame(observations, self._library_views(), cfg.thresholds, registry)
            pose, usable, rejected = self._estimate_pose(frame, res.matched, registry, prediction)
            if usable:
                self._last_match_frame = frame
            res, self._no_fold = self._verify_lone_ambiguous(
                frame, res, observations, pose, bool(usable)
            )
            self.estimate.append(pose)
            matched = [m for m in res.matched if m not in rejected]
            unmatched_ids = list(res.unmatched) + [m.observation_id for m in rejected]
            obs_by_id = {o.observation_id: o for o in observations}
            for m in matched:
                if m.object_id in self._no_fold:
                    continue
                self._anchor_cache[m.object_id] = (
                    frame,
                    obs_by_id[m.observation_id].latent.centroid(),
                )

            change_flag = False
            if unmatched_ids:
                change_flag = self._change_detection(
                    frame, pose, observations, matched, unmatched_ids
                )

            new_ready = self.tracker.update(
                [o for o in observations if o.observation_id in res.new], pose
            )
            kf = self.graph.maybe_add_keyframe(
                frame, pose, {}, {}, bool(res.new), self._odom_dist, change_flag
            )
            if kf is not None:
                self.kf_frame[kf.kf_id] = frame
                self.keyframe_frames.append(frame)
                self._odom_dist = 0.0
                self._handle_keyframe(frame, kf, observations, matched, new_ready)
                self.estimate[frame] = kf.pose
                self.anchored.append((kf.kf_id, Pose3.identity()))
            else:
                prev_kf = self.graph.latest()
                if prev_kf is not None:
                    self.anchored.append(
                        (prev_kf.kf_id, prev_kf.pose.inverse() @ pose)
                    )
                else:
                    self.anchored.append((None, pose))

        # final tightening: one last global solve over everything, then the
        # bookkeeping that depends on the final estimates
        if self.graph.kf_ids and any(e for e in self.graph.edges):
            info = self.graph.optimize_global()
            if not info.converged:
                self.solver_warnings += 1
            self.library.recompute_world_latents(self._registry())
        final = []
        for frame, (kf_id, rel) in enumerate(self.anchored):
            if kf_id is None:
                final.append(rel)
            else:
                final.append(self.graph.keyframes[kf_id].pose @ rel)
        self.estimate = final
        if self.first_loop_frame is not None:
            # Removal evidence may come from any frame a period-gap after the
            # record's last sighting: by now the final global solve has made
            # every pose in the run trustworthy.
            removed = mark_removed(
                self.library, [(0, n - 1)], self._covers, epoch_gap=PERIOD_GAP_FRAMES
            )
            for oid in removed:
                self.detections.append((self.library.records[oid].model_key, n - 1))
        models = {m.model_id: m for m in self.catalog}
        maintenance = maintain_map(self.library, models)
        return RunResult(
            self.estimate,
            self.graph,
            self.library,
            self.detections,
            self.keyframe_frames,
            maintenance,
            self.solver_warnings,
        )


def run_slam(
    script: SceneScript,
    trajectory: Trajectory,
    catalog: list[CanonicalModel],
    config: RunConfig,
) -> RunResult:
    return SlamRunner(script, trajectory, catalog, config).run()


def write_trajectory(path: str | Path, estimate: list[Pose3]) -> None:
    lines = []
    for k, p in enumerate(estimate):
        q = p.quaternion()
        lines.append(
            "%d %s %s %s %s %s %s %s"
            % (
                k,
                repr(float(p.t[0])), repr(float(p.t[1])), repr(float(p.t[2])),
                repr(float(q[0])), repr(float(q[1])), repr(float(q[2])), repr(float(q[3])),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_artifacts(result: RunResult, catalog: list[CanonicalModel], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.txt", result.estimate)
    result.graph.dump(out / "pose_graph.txt")
    result.library.checkpoint(out / "library.json")
    export_map(result.library, {m.model_id: m for m in catalog}, out / "map")


__all__ = [
    "MODE_ALL_OBJECT",
    "MODE_FUSED",
    "MODE_MUG_ONLY",
    "MODES",
    "RunConfig",
    "RunResult",
    "SlamRunner",
    "best_model_key",
    "run_slam",
    "write_artifacts",
    "write_trajectory",
]
