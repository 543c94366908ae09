"""Per-frame data association.

Two passes: unambiguous observations first (shape-descriptor gate, then a
latent-derived transform projects the observed latent centroid into the
candidate's last-seen keyframe for a proximity gate), then ambiguous
observations, whose projection transform is borrowed from this frame's
unambiguous matches when possible, or recovered by joint alignment of paired
ambiguous candidates, or — for a lone ambiguous object — taken from its own
(symmetry-family) alignment and flagged so it is never used as a pose
constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping

import numpy as np

from .geometry import Pose3, chamfer, horn_align
from .models import LatentCode, align_latent_sets, cosine_similarity, shape_descriptor

# Transform provenance of a match: safe for pose constraints unless lone-ambiguous.
PROV_UNAMBIGUOUS = "unambiguous"
PROV_RESOLVED_UNAMBIGUOUS = "resolved-unambiguous"
PROV_RESOLVED_PAIR = "resolved-pair"
PROV_LONE_AMBIGUOUS = "lone-ambiguous"

MAX_PAIR_SEARCH = 28  # C(8, 2): cap on scored candidate pairings per frame

# Agreement tolerances for the cross-object transform consensus: two matches
# agree when their implied inter-frame camera transforms (composed into a
# common keyframe) are this close. A moved object's self-derived transform is
# off by the full move, far outside these bounds.
CONSENSUS_ROT_TOL = 0.1  # rad
CONSENSUS_TRANS_TOL = 0.05  # m


@dataclass(frozen=True)
class Thresholds:
    delta_shape: float = 0.95
    delta_prox: float = 0.03  # meters, in the keyframe camera frame
    delta_e: float = 0.02  # meters, change-detection consistency gate

    def __post_init__(self):
        if self.delta_shape <= 0 or self.delta_prox <= 0 or self.delta_e <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class LibraryView:
    """Read-only snapshot of a library object for association."""

    object_id: int
    descriptor: np.ndarray
    ambiguous: bool
    last_keyframe_id: int
    latent_kf: LatentCode  # latent in the last-seen keyframe's camera frame
    center_kf: np.ndarray  # latent centroid in that keyframe's camera frame
    # (the latent is full-shape and SE(3)-equivariant, so its centroid is
    # view-independent; a partial-cloud mean shifts with the visible half)


@dataclass(frozen=True)
class Match:
    observation_id: str
    object_id: int
    transform: Pose3  # current camera frame -> candidate's last keyframe camera frame
    keyframe_id: int
    provenance: str


@dataclass(frozen=True)
class AssociationResult:
    matched: list[Match] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)
    new: list[str] = field(default_factory=list)

    def is_partition_of(self, observation_ids: list[str]) -> bool:
        got = [m.observation_id for m in self.matched] + list(self.unmatched) + list(self.new)
        return sorted(got) == sorted(observation_ids) and len(set(got)) == len(got)


def _registry_relative(registry: Mapping[int, Pose3], kf_from: int, kf_to: int) -> Pose3:
    """Transform taking kf_from camera coords into kf_to camera coords, from
    the registry's current pose estimates."""
    return registry[kf_to].inverse() @ registry[kf_from]


def _shape_candidates(descriptor, library, delta_shape):
    out = []
    for v in library:
        if v.descriptor.shape != descriptor.shape:
            continue
        if cosine_similarity(descriptor, v.descriptor) >= delta_shape:
            out.append(v)
    return out


def _accept_min_distance(scored, delta_prox):
    """scored: list of (distance, view, transform, provenance); smallest
    distance wins, ties broken by smallest library object id."""
    if not scored:
        return None
    scored.sort(key=lambda s: (s[0], s[1].object_id))
    d, view, T, prov = scored[0]
    if d < delta_prox:
        return view, T, prov, d
    return None


def associate_frame(
    observations,
    library: list[LibraryView],
    thresholds: Thresholds,
    registry: Mapping[int, Pose3],
) -> AssociationResult:
    """Partition a frame's observations into matched / unmatched / new.

    ``observations`` are scene Observation records (descriptor read from the
    latent); ``registry`` maps keyframe id -> current pose estimate, used
    only to hop between nearby keyframes when projecting ambiguous objects.
    """
    matched: list[Match] = []
    unmatched: list[str] = []
    new: list[str] = []
    matched_ids: set[int] = set()

    plain = [o for o in observations if not o.ambiguous]
    ambig = [o for o in observations if o.ambiguous]

    # --- Pass 1: unambiguous ------------------------------------------------
    pass1_transforms: list[tuple[Pose3, int]] = []  # (current->kf transform, kf id)
    for o in sorted(plain, key=lambda o: o.observation_id):
        desc = shape_descriptor(o.latent)
        cands = _shape_candidates(desc, library, thresholds.delta_shape)
        cands = [c for c in cands if c.object_id not in matched_ids]
        if not cands:
            new.append(o.observation_id)
            continue
        center = o.latent.centroid()
        scored = []
        for c in cands:
            if c.latent_kf.points.shape != o.latent.points.shape:
                continue
            T, _ = horn_align(o.latent.points, c.latent_kf.points)
            scored.append((float(np.linalg.norm(T.apply(center) - c.center_kf)), c, T, PROV_UNAMBIGUOUS))
        hit = _accept_min_distance(scored, thresholds.delta_prox)
        if hit is None:
            unmatched.append(o.observation_id)
        else:
            view, T, prov, _ = hit
            matched.append(Match(o.observation_id, view.object_id, T, view.last_keyframe_id, prov))
            matched_ids.add(view.object_id)
            pass1_transforms.append((T, view.last_keyframe_id))

    # Cross-object consensus: a match whose implied camera transform
    # disagrees with the other matches carries an object that moved (or an
    # orientation-flipped re-detection); it belongs to the unmatched set for
    # change detection, not to pose-constraint generation.
    pass1_matches = [m for m in matched]
    inliers, outliers = _consensus_filter(pass1_matches, registry)
    if outliers:
        matched = inliers
        for m in outliers:
            unmatched.append(m.observation_id)
            matched_ids.discard(m.object_id)
        pass1_transforms = [(m.transform, m.keyframe_id) for m in inliers]

    # --- Pass 2: ambiguous --------------------------------------------------
    amb_entries = []
    for o in sorted(ambig, key=lambda o: o.observation_id):
        desc = shape_descriptor(o.latent)
        cands = _shape_candidates(desc, library, thresholds.delta_shape)
        amb_entries.append((o, desc, cands))

    pair_transform = None  # (transform current->common kf, common kf id)
    if not pass1_transforms and sum(1 for _, _, c in amb_entries if c) >= 2:
        pair_transform = _resolve_ambiguous_pairs(amb_entries, registry)

    for o, desc, cands in amb_entries:
        cands = [c for c in cands if c.object_id not in matched_ids]
        if not cands:
            new.append(o.observation_id)
            continue
        center = o.latent.centroid()
        scored = []
        for c in cands:
            if c.latent_kf.points.shape != o.latent.points.shape:
                continue
            if pass1_transforms:
                # (a) borrow this frame's unambiguous transforms; hop to the
                # candidate's keyframe through the registry.
                for T1, kf1 in pass1_transforms:
                    if kf1 not in registry or c.last_keyframe_id not in registry:
                        continue
                    T = _registry_relative(registry, kf1, c.last_keyframe_id) @ T1
                    d = float(np.linalg.norm(T.apply(center) - c.center_kf))
                    scored.append((d, c, T, PROV_RESOLVED_UNAMBIGUOUS))
            elif pair_transform is not None:
                Tc, kfc = pair_transform
                if kfc in registry and c.last_keyframe_id in registry:
                    T = _registry_relative(registry, kfc, c.last_keyframe_id) @ Tc
                    d = float(np.linalg.norm(T.apply(center) - c.center_kf))
                    scored.append((d, c, T, PROV_RESOLVED_PAIR))
            else:
                # lone ambiguous object: its own alignment is some member of
                # the symmetry family — usable for association, never for
                # pose constraints.
                T, _, _ = align_latent_sets([o.latent.points], [c.latent_kf.points], [True])
                d = float(np.linalg.norm(T.apply(center) - c.center_kf))
                scored.append((d, c, T, PROV_LONE_AMBIGUOUS))
        hit = _accept_min_distance(scored, thresholds.delta_prox)
        if hit is None:
            unmatched.append(o.observation_id)
        else:
            view, T, prov, _ = hit
            matched.append(Match(o.observation_id, view.object_id, T, view.last_keyframe_id, prov))
            matched_ids.add(view.object_id)

    return AssociationResult(matched, unmatched, new)


def _consensus_filter(matches, registry):
    """Split pass-1 matches into transform-consistent inliers and outliers.

    All transforms are composed into a common keyframe through the registry
    (matches within one frame reference temporally close keyframes, where the
    registry's relative estimates are accurate). The pivot is the match that
    agrees with the most others; everything agreeing with the pivot stays."""
    if len(matches) <= 1:
        return list(matches), []
    target = max(m.keyframe_id for m in matches)
    if any(m.keyframe_id not in registry for m in matches) or target not in registry:
        return list(matches), []
    comp = [_registry_relative(registry, m.keyframe_id, target) @ m.transform for m in matches]

    def agree(i, j):
        d = comp[i].inverse() @ comp[j]
        return d.rotation_angle() < CONSENSUS_ROT_TOL and (
            float(np.linalg.norm(comp[i].t - comp[j].t)) < CONSENSUS_TRANS_TOL
        )

    counts = [sum(agree(i, j) for j in range(len(matches)) if j != i) for i in range(len(matches))]
    pivot = min(range(len(matches)), key=lambda i: (-counts[i], matches[i].object_id))
    if counts[pivot] == 0:
        # every pair disagrees: no way to tell mover from stayer this frame
        return [], list(matches)
    inliers, outliers = [], []
    for i, m in enumerate(matches):
        (inliers if i == pivot or agree(pivot, i) else outliers).append(m)
    return inliers, outliers


def _resolve_ambiguous_pairs(amb_entries, registry):
    """Pass 2(b): joint alignment over pairs of ambiguous observations
    matched to candidate pairs, best pairing by post-alignment Chamfer
    residual. Returns (transform current->common keyframe, keyframe id)."""
    pairings = []
    for (oa, da, ca), (ob, db, cb) in combinations(amb_entries, 2):
        for va in ca:
            for vb in cb:
                if va.object_id == vb.object_id:
                    continue
                if va.last_keyframe_id not in registry or vb.last_keyframe_id not in registry:
                    continue
                sim = cosine_similarity(da, va.descriptor) + cosine_similarity(db, vb.descriptor)
                pairings.append((-sim, oa, ob, va, vb))
    pairings.sort(key=lambda p: (p[0], p[3].object_id, p[4].object_id))
    best = None
    for _, oa, ob, va, vb in pairings[:MAX_PAIR_SEARCH]:
        common = max(va.last_keyframe_id, vb.last_keyframe_id)
        Ta = _registry_relative(registry, va.last_keyframe_id, common)
        Tb = _registry_relative(registry, vb.last_keyframe_id, common)
        dst = [Ta.apply(va.latent_kf.points), Tb.apply(vb.latent_kf.points)]
        src = [oa.latent.points, ob.latent.points]
        if src[0].shape != dst[0].shape or src[1].shape != dst[1].shape:
            continue
        T, _, degenerate = align_latent_sets(src, dst, [True, True])
        if degenerate:
            continue
        resid = chamfer(T.apply(np.concatenate(src)), np.concatenate(dst))
        if best is None or resid < best[0]:
            best = (resid, T, common)
    if best is None:
        return None
    return best[1], best[2]


__all__ = [
    "AssociationResult",
    "LibraryView",
    "Match",
    "Thresholds",
    "associate_frame",
    "MAX_PAIR_SEARCH",
    "PROV_LONE_AMBIGUOUS",
    "PROV_RESOLVED_PAIR",
    "PROV_RESOLVED_UNAMBIGUOUS",
    "PROV_UNAMBIGUOUS",
]
