"""Object library, world-latent maintenance, change detection, and map export.

The library stores one record per physical object. World latents are running
pointwise means of back-projected camera-frame observations and are recomputed
whenever the keyframe pose estimates move (global solves). Change detection
compares the relative layout of unmatched ("query") objects against matched
("anchor") objects, which cancels any common camera-pose drift exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .geometry import Pose3, aabb, horn_align, overlap_fraction
from .models import (
    CanonicalModel,
    LatentCode,
    cosine_similarity,
    decode_reconstruction,
    resolve_ring_alignment,
    shape_descriptor,
)

STATUS_UNCHANGED = "unchanged"
STATUS_CHANGED = "changed"
STATUS_REMOVED = "removed"

# Instantiation gates for previously unseen objects: close enough to trust the
# partial cloud, dense enough to encode, and classified "new" this many
# consecutive frames.
INSTANTIATION_MAX_RANGE = 2.0  # m
INSTANTIATION_MIN_POINTS = 100
INSTANTIATION_STREAK = 3

DUPLICATE_OVERLAP = 0.95  # partial-duplicate deletion threshold
REHOME_OVERLAP = 0.20  # changed-object box intersection for stale-record deletion

# Minimum covered frames inside a loop-closed revisit span before "never
# shape-matched" counts as removal evidence rather than a fluke occlusion.
REMOVAL_MIN_COVERAGE = 3


@dataclass
class ObjectRecord:
    object_id: int
    category: str
    model_key: str  # catalog model id resolved by descriptor match
    ambiguous: bool
    descriptor: np.ndarray
    world_latent: LatentCode  # frame "world", running mean of back-projections
    observations: list[tuple[int, LatentCode]] = field(default_factory=list)  # (kf id, camera latent)
    visibility: set[int] = field(default_factory=set)  # keyframe ids with a shape match
    matched_frames: set[int] = field(default_factory=set)  # frame indices with a shape match
    status: str = STATUS_UNCHANGED
    changed_at: int | None = None
    last_partial: np.ndarray | None = None
    last_keyframe_id: int = -1

    def __post_init__(self):
        if self.world_latent.frame != "world":
            raise ValueError("world latent must be in the world frame")

    @property
    def removed(self) -> bool:
        return self.status == STATUS_REMOVED

    def last_center(self) -> np.ndarray:
        return self.world_latent.centroid()


def _back_project(latent: LatentCode, pose: Pose3) -> np.ndarray:
    return pose.apply(latent.points)


def _mean_world_points(record: ObjectRecord, poses: Mapping[int, Pose3]) -> np.ndarray:
    """Pointwise mean of all back-projections under the given keyframe poses.

    Ambiguous latents are re-indexed onto the first view's rings so the mean
    does not smear observations taken with different ring indexings."""
    acc = None
    ref = None
    n = 0
    for kf_id, z in record.observations:
        pts = _back_project(z, poses[kf_id])
        if record.ambiguous:
            if ref is None:
                ref = pts
            else:
                pts = resolve_ring_alignment(pts, ref)
        acc = pts if acc is None else acc + pts
        n += 1
    if n == 0:
        raise ValueError("record has no observations")
    return acc / n


class ObjectLibrary:
    """Single-writer store of object records."""

    def __init__(self):
        self.records: dict[int, ObjectRecord] = {}
        self._next_id = 0

    # -- record lifecycle ----------------------------------------------------

    def instantiate(
        self,
        category: str,
        model_key: str,
        ambiguous: bool,
        latent: LatentCode,
        partial: np.ndarray,
        kf_id: int,
        frame_index: int,
        pose: Pose3,
    ) -> ObjectRecord:
        world = LatentCode(_back_project(latent, pose), "world")
        rec = ObjectRecord(
            self._next_id,
            category,
            model_key,
            ambiguous,
            shape_descriptor(latent),
            world,
            observations=[(kf_id, latent)],
            visibility={kf_id},
            matched_frames={frame_index},
            last_partial=np.asarray(partial, float),
            last_keyframe_id=kf_id,
        )
        self.records[rec.object_id] = rec
        self._next_id += 1
        return rec

    def live(self) -> list[ObjectRecord]:
        return [r for r in self.records.values() if not r.removed]

    def update_world_latent(
        self,
        object_id: int,
        latent: LatentCode,
        kf_id: int,
        frame_index: int,
        pose: Pose3,
        poses: Mapping[int, Pose3],
        partial: np.ndarray | None = None,
    ) -> ObjectRecord:
        """Fold a new camera-frame observation into the running world mean."""
        rec = self.records[object_id]
        rec.observations.append((kf_id, latent))
        rec.visibility.add(kf_id)
        rec.matched_frames.add(frame_index)
        rec.descriptor = shape_descriptor(latent)
        if partial is not None:
            rec.last_partial = np.asarray(partial, float)
            rec.last_keyframe_id = kf_id
        rec.world_latent = LatentCode(_mean_world_points(rec, poses), "world")
        return rec

    def recompute_world_latents(self, poses: Mapping[int, Pose3]) -> None:
        """Re-average every record's back-projections; run after global solves."""
        for rec in self.records.values():
            if rec.observations:
                rec.world_latent = LatentCode(_mean_world_points(rec, poses), "world")

    # -- change bookkeeping ----------------------------------------------------

    def mark_changed(
        self,
        object_id: int,
        frame_index: int,
        latent: LatentCode,
        kf_id: int,
        pose: Pose3,
        partial: np.ndarray | None = None,
    ) -> ObjectRecord:
        """Re-home a record after a confirmed move: restart the world latent
        at the new placement (old back-projections describe the old spot)."""
        rec = self.records[object_id]
        rec.status = STATUS_CHANGED
        rec.changed_at = frame_index
        rec.observations = [(kf_id, latent)]
        rec.visibility.add(kf_id)
        rec.matched_frames.add(frame_index)
        rec.world_latent = LatentCode(_back_project(latent, pose), "world")
        if partial is not None:
            rec.last_partial = np.asarray(partial, float)
            rec.last_keyframe_id = kf_id
        return rec

    # -- persistence -----------------------------------------------------------

    def checkpoint(self, path: str | Path) -> None:
        out = {"next_id": self._next_id, "records": []}
        for oid in sorted(self.records):
            r = self.records[oid]
            out["records"].append(
                {
                    "object_id": r.object_id,
                    "category": r.category,
                    "model_key": r.model_key,
                    "ambiguous": r.ambiguous,
                    "descriptor": r.descriptor.tolist(),
                    "world_latent": r.world_latent.points.tolist(),
                    "observations": [
                        {"kf": k, "frame": z.frame, "points": z.points.tolist()}
                        for k, z in r.observations
                    ],
                    "visibility": sorted(r.visibility),
                    "matched_frames": sorted(r.matched_frames),
                    "status": r.status,
                    "changed_at": r.changed_at,
                    "last_partial": None if r.last_partial is None else r.last_partial.tolist(),
                    "last_keyframe_id": r.last_keyframe_id,
                }
            )
        Path(path).write_text(json.dumps(out, indent=1))

    @staticmethod
    def load(path: str | Path) -> "ObjectLibrary":
        raw = json.loads(Path(path).read_text())
        lib = ObjectLibrary()
        lib._next_id = raw["next_id"]
        for d in raw["records"]:
            rec = ObjectRecord(
                d["object_id"],
                d["category"],
                d["model_key"],
                d["ambiguous"],
                np.array(d["descriptor"]),
                LatentCode(np.array(d["world_latent"]), "world"),
                observations=[
                    (o["kf"], LatentCode(np.array(o["points"]), o["frame"]))
                    for o in d["observations"]
                ],
                visibility=set(d["visibility"]),
                matched_frames=set(d["matched_frames"]),
                status=d["status"],
                changed_at=d["changed_at"],
                last_partial=None if d["last_partial"] is None else np.array(d["last_partial"]),
                last_keyframe_id=d["last_keyframe_id"],
            )
            lib.records[rec.object_id] = rec
        return lib


# ---------------------------------------------------------------------------
# Provisional tracking of previously unseen objects
# ---------------------------------------------------------------------------


@dataclass
class _Candidate:
    descriptor: np.ndarray
    center_world: np.ndarray
    streak: int


class ProvisionalTracker:
    """Gates instantiation of new records: an observation must classify as
    "new" on consecutive frames, within range, with enough visible points."""

    def __init__(
        self,
        max_range: float = INSTANTIATION_MAX_RANGE,
        min_points: int = INSTANTIATION_MIN_POINTS,
        streak: int = INSTANTIATION_STREAK,
        match_radius: float = 0.1,
        descriptor_gate: float = 0.95,
    ):
        self.max_range = max_range
        self.min_points = min_points
        self.streak = streak
        self.match_radius = match_radius
        self.descriptor_gate = descriptor_gate
        self._candidates: list[_Candidate] = []

    def update(self, new_observations: Iterable, camera_pose: Pose3) -> list:
        """Advance one frame. ``new_observations`` are scene Observation
        records classified "new" this frame. Returns the observations whose
        candidates just completed the full gate (ready to instantiate)."""
        ready = []
        survivors: list[_Candidate] = []
        for o in sorted(new_observations, key=lambda o: o.observation_id):
            if o.range_m > self.max_range or o.visible_count < self.min_points:
                continue
            desc = shape_descriptor(o.latent)
            center = camera_pose.apply(o.latent.centroid())
            hit = None
            for c in self._candidates:
                if c.descriptor.shape != desc.shape:
                    continue
                if (
                    cosine_similarity(c.descriptor, desc) >= self.descriptor_gate
                    and np.linalg.norm(c.center_world - center) < self.match_radius
                ):
                    hit = c
                    break
            if hit is None:
                hit = _Candidate(desc, center, 0)
            else:
                self._candidates = [c for c in self._candidates if c is not hit]
            hit.streak += 1
            hit.descriptor = desc
            hit.center_world = center
            if hit.streak >= self.streak:
                ready.append(o)
            else:
                survivors.append(hit)
        # candidates not re-seen this frame lose their streak entirely
        self._candidates = survivors
        return ready


# ---------------------------------------------------------------------------
# Change detection on the object graph
# ---------------------------------------------------------------------------


def detect_changes(
    queries: list[tuple[object, np.ndarray, np.ndarray]],
    anchors: list[tuple[np.ndarray, np.ndarray]],
    delta_e: float,
) -> dict | None:
    """Relative-layout change test.

    ``queries``: (key, current-frame world center, library world center) per
    unmatched object with a shape-similar library counterpart. ``anchors``:
    (current center, library center) per matched object. Returns
    {key: changed?} or None when there are no anchors (detection deferred).

    The current-frame graph is aligned onto the library graph using the
    anchor correspondences, so a rigid camera-drift common to all current
    centers cancels exactly. Anchors that disagree with the aligned library
    layout by more than ``delta_e`` are themselves suspect (a stale cache
    entry, or an object whose own change has not been confirmed yet) and are
    trimmed from the alignment estimate, so one bad anchor cannot skew it and
    condemn every query; they remain edge candidates, since a genuine move
    breaks the edges to every anchor regardless. A query is unchanged when at
    least one of its oriented query-to-anchor edges survives within
    ``delta_e`` (inclusive)."""
    if delta_e <= 0:
        raise ValueError("delta_e must be positive")
    if not anchors:
        return None
    cur = np.array([a[0] for a in anchors], float)
    lib = np.array([a[1] for a in anchors], float)

    def _align(c, l):
        if len(c) >= 3:
            T, _ = horn_align(c, l)
        else:
            T = Pose3(np.eye(3), l.mean(axis=0) - c.mean(axis=0))
        return T

    acur, alib = cur, lib
    T = _align(acur, alib)
    for _ in range(len(anchors)):
        resid = np.linalg.norm(T.apply(acur) - alib, axis=1)
        if len(acur) <= 1 or resid.max() <= delta_e:
            break
        keep = resid < resid.max()
        acur, alib = acur[keep], alib[keep]
        T = _align(acur, alib)
    verdicts = {}
    lib_anchor = lib
    cur_anchor = T.apply(cur)
    for key, c_cur, c_lib in queries:
        e_cur = T.apply(np.asarray(c_cur, float)) - cur_anchor
        e_lib = np.asarray(c_lib, float) - lib_anchor
        d = np.linalg.norm(e_cur - e_lib, axis=1)
        verdicts[key] = not bool(np.any(d <= delta_e))
    return verdicts


# ---------------------------------------------------------------------------
# Removal and appendix map-maintenance rules
# ---------------------------------------------------------------------------


def mark_removed(
    library: ObjectLibrary,
    loop_spans: list[tuple[int, int]],
    covers: Callable[[int, np.ndarray], bool],
    epoch_gap: int | None = None,
) -> list[int]:
    """Mark records Removed when a loop-closed revisit period swept over
    their last known center without a single shape match.

    ``loop_spans``: inclusive frame spans bracketed by loop-closure edges
    (revisit period). ``covers(frame, center)`` reports whether that frame's
    camera frustum covers a world point. ``epoch_gap`` restricts the evidence
    to frames at least that far after the record's last shape match, so the
    record's own observation epoch never argues for its removal."""
    removed = []
    for rec in library.live():
        center = rec.last_center()
        last_seen = max(rec.matched_frames, default=-1)
        for lo, hi in loop_spans:
            start = lo if epoch_gap is None else max(lo, last_seen + epoch_gap + 1)
            span = range(start, hi + 1)
            covering = [f for f in span if covers(f, center)]
            if len(covering) < REMOVAL_MIN_COVERAGE:
                continue
            if not rec.matched_frames.intersection(covering):
                rec.status = STATUS_REMOVED
                removed.append(rec.object_id)
                break
    return removed


def maintain_map(library: ObjectLibrary, models: Mapping[str, CanonicalModel]) -> dict:
    """Appendix cleanup rules over live reconstructions.

    (1) A record whose box sits almost entirely (>= 0.95) inside a larger
    record's box is a partial duplicate and is deleted. (2) A Changed record
    landing on a stale record's spot (>= 20% of the changed box's volume)
    deletes the stale record. Returns {"duplicates": [...], "rehomed": [...]}."""
    live = sorted(library.live(), key=lambda r: r.object_id)
    boxes = {
        r.object_id: aabb(decode_reconstruction(r.world_latent, models[r.model_key]))
        for r in live
    }
    deleted: set[int] = set()
    duplicates, rehomed = [], []
    for a in live:
        if a.object_id in deleted:
            continue
        for b in live:
            if b.object_id == a.object_id or b.object_id in deleted:
                continue
            ba, bb = boxes[a.object_id], boxes[b.object_id]
            if ba.volume <= bb.volume and overlap_fraction(ba, bb) >= DUPLICATE_OVERLAP:
                deleted.add(a.object_id)
                duplicates.append(a.object_id)
                break
    for a in live:
        if a.object_id in deleted or a.status != STATUS_CHANGED:
            continue
        for b in live:
            if b.object_id == a.object_id or b.object_id in deleted:
                continue
            if b.status == STATUS_CHANGED and b.changed_at is not None and (
                a.changed_at is None or b.changed_at >= a.changed_at
            ):
                continue
            if overlap_fraction(boxes[a.object_id], boxes[b.object_id]) >= REHOME_OVERLAP:
                deleted.add(b.object_id)
                rehomed.append((a.object_id, b.object_id))
    for oid in deleted:
        del library.records[oid]
    return {"duplicates": duplicates, "rehomed": rehomed}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _write_ply(path: Path, points: np.ndarray) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for p in points:
        lines.append("%.6f %.6f %.6f" % (p[0], p[1], p[2]))
    path.write_text("\n".join(lines) + "\n")


def export_map(
    library: ObjectLibrary, models: Mapping[str, CanonicalModel], out_dir: str | Path
) -> Path:
    """One ASCII PLY reconstruction per live object plus a JSON index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in sorted(library.live(), key=lambda r: r.object_id):
        cloud = decode_reconstruction(rec.world_latent, models[rec.model_key])
        name = f"object_{rec.object_id:04d}.ply"
        _write_ply(out / name, cloud)
        box = aabb(cloud)
        index.append(
            {
                "object_id": rec.object_id,
                "category": rec.category,
                "status": rec.status,
                "centroid": [round(float(x), 9) for x in rec.world_latent.centroid()],
                "bounding_box": {
                    "min": [round(float(x), 9) for x in box.lo],
                    "max": [round(float(x), 9) for x in box.hi],
                },
                "file": name,
            }
        )
    index_path = out / "map_index.json"
    index_path.write_text(json.dumps(index, indent=1))
    return index_path


__all__ = [
    "ObjectLibrary",
    "ObjectRecord",
    "ProvisionalTracker",
    "detect_changes",
    "export_map",
    "maintain_map",
    "mark_removed",
    "DUPLICATE_OVERLAP",
    "REHOME_OVERLAP",
    "INSTANTIATION_MAX_RANGE",
    "INSTANTIATION_MIN_POINTS",
    "INSTANTIATION_STREAK",
    "STATUS_CHANGED",
    "STATUS_REMOVED",
    "STATUS_UNCHANGED",
]
