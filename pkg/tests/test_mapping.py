import json

import numpy as np
import pytest

from objslam.geometry import Pose3, aabb, overlap_fraction, so3_exp
from objslam.mapping import (
    STATUS_CHANGED,
    STATUS_REMOVED,
    STATUS_UNCHANGED,
    ObjectLibrary,
    ProvisionalTracker,
    detect_changes,
    export_map,
    maintain_map,
    mark_removed,
)
from objslam.models import LatentCode, NoiseParams, generate_catalog, oracle_encode

CATALOG = generate_catalog(17, 8)
MODELS = {m.model_id: m for m in CATALOG}
MUG = next(m for m in CATALOG if not m.ambiguous)
BOTTLE = next(m for m in CATALOG if m.ambiguous)


def camera_latent(model, world_pose, cam_pose, rng=None, sigma=0.0, frame="camera:0"):
    T = cam_pose.inverse() @ world_pose
    pts = T.apply(model.latent)
    if sigma:
        pts = pts + rng.normal(scale=sigma, size=pts.shape)
    return LatentCode(pts, frame)


def make_library(records):
    lib = ObjectLibrary()
    for model, wpose, kf_id, pose in records:
        z = camera_latent(model, wpose, pose, frame=f"camera:{kf_id}")
        lib.instantiate(model.category, model.model_id, model.ambiguous,
                        z, pose.apply(z.points), kf_id, kf_id, pose)
    return lib


class TestWorldLatent:
    def test_first_observation_is_back_projection(self):
        rng = np.random.default_rng(0)
        pose = Pose3.random(rng)
        wpose = Pose3.random(rng)
        lib = make_library([(MUG, wpose, 0, pose)])
        rec = lib.records[0]
        assert np.abs(rec.world_latent.points - wpose.apply(MUG.latent)).max() < 1e-12

    def test_two_exact_observations_mean_equals_either(self):
        rng = np.random.default_rng(1)
        wpose = Pose3.random(rng)
        p0, p1 = Pose3.random(rng), Pose3.random(rng)
        lib = make_library([(MUG, wpose, 0, p0)])
        poses = {0: p0, 1: p1}
        rec = lib.update_world_latent(
            0, camera_latent(MUG, wpose, p1, frame="camera:1"), 1, 1, p1, poses
        )
        assert np.abs(rec.world_latent.points - wpose.apply(MUG.latent)).max() < 1e-12

    def test_noise_averages_down(self):
        # per-point error shrinks statistically as 1/sqrt(N)
        errs_1, errs_16 = [], []
        wpose = Pose3(np.eye(3), np.array([0.5, 0.2, 0.8]))
        for seed in range(30):
            rng = np.random.default_rng(seed)
            poses = {k: Pose3.random(rng) for k in range(16)}
            lib = ObjectLibrary()
            z0 = camera_latent(MUG, wpose, poses[0], rng, 0.001, "camera:0")
            lib.instantiate("mug", MUG.model_id, False, z0, z0.points, 0, 0, poses[0])
            errs_1.append(
                np.linalg.norm(lib.records[0].world_latent.points - wpose.apply(MUG.latent), axis=1).mean()
            )
            for k in range(1, 16):
                lib.update_world_latent(
                    0, camera_latent(MUG, wpose, poses[k], rng, 0.001, f"camera:{k}"),
                    k, k, poses[k], poses,
                )
            errs_16.append(
                np.linalg.norm(lib.records[0].world_latent.points - wpose.apply(MUG.latent), axis=1).mean()
            )
        ratio = np.mean(errs_1) / np.mean(errs_16)
        assert 3.0 < ratio < 5.5  # ~ sqrt(16) = 4

    def test_ambiguous_views_ring_aligned_before_averaging(self):
        # two views of a bottle whose oracle ring indexings differ must not smear
        wpose = Pose3(so3_exp(np.array([0.4, 0, 0])), np.array([0.0, 0.0, 0.9]))
        lib = ObjectLibrary()
        poses = {}
        for k, ang in enumerate([0.0, 2.4]):
            c = np.array([1.5 * np.sin(ang), -1.5 * np.cos(ang), 1.2])
            look = wpose.t - c
            look /= np.linalg.norm(look)
            up = np.array([0, 0, 1.0])
            right = np.cross(look, up); right /= np.linalg.norm(right)
            pose = Pose3(np.stack([right, np.cross(look, right), look], axis=1), c)
            poses[k] = pose
            T = pose.inverse() @ wpose
            partial = T.apply(BOTTLE.surface[(T.apply(BOTTLE.surface) @ (-pose.inverse().apply(np.zeros(3)))) > -1e9][:400])
            z = oracle_encode(partial, T, BOTTLE, NoiseParams(), np.random.default_rng(0), f"camera:{k}")
            if k == 0:
                lib.instantiate("bottle", BOTTLE.model_id, True, z, partial, 0, 0, pose)
            else:
                lib.update_world_latent(0, z, k, k, pose, poses)
        world = lib.records[0].world_latent.points
        expect = wpose.apply(BOTTLE.latent)
        # after ring re-indexing the mean reproduces a rigid copy of the latent
        d = np.linalg.norm(world[:, None, :] - expect[None, :, :], axis=2).min(axis=1)
        assert d.max() < 1e-9

    def test_recompute_after_pose_update(self):
        rng = np.random.default_rng(3)
        wpose = Pose3.random(rng)
        p0, p1 = Pose3.random(rng), Pose3.random(rng)
        lib = make_library([(MUG, wpose, 0, p0)])
        lib.update_world_latent(0, camera_latent(MUG, wpose, p1, frame="camera:1"), 1, 1, p1, {0: p0, 1: p1})
        # a solver shifts keyframe 1; the mean must follow the new estimate
        p1b = p1 @ Pose3.exp(rng.normal(scale=0.1, size=6))
        lib.recompute_world_latents({0: p0, 1: p1b})
        z1 = camera_latent(MUG, wpose, p1, frame="camera:1")
        expect = 0.5 * (wpose.apply(MUG.latent) + p1b.apply(z1.points))
        assert np.abs(lib.records[0].world_latent.points - expect).max() < 1e-12


class TestDetectChanges:
    def anchors(self, n, rng, drift=Pose3.identity()):
        libc = [rng.uniform(0, 5, 3) for _ in range(n)]
        return [(drift.apply(c), c) for c in libc]

    def test_no_anchors_defers(self):
        assert detect_changes([("q", np.zeros(3), np.zeros(3))], [], 0.02) is None

    def test_static_query_unchanged_under_common_drift(self):
        rng = np.random.default_rng(4)
        drift = Pose3.random(rng, max_angle=0.3, max_trans=0.5)
        anchors = self.anchors(4, rng, drift)
        c_lib = rng.uniform(0, 5, 3)
        v = detect_changes([("q", drift.apply(c_lib), c_lib)], anchors, 0.02)
        assert v == {"q": False}

    def test_moved_query_changed(self):
        rng = np.random.default_rng(5)
        anchors = self.anchors(3, rng)
        c_lib = rng.uniform(0, 5, 3)
        c_cur = c_lib + np.array([0.5, 0, 0])
        v = detect_changes([("q", c_cur, c_lib)], anchors, 0.02)
        assert v == {"q": True}

    def test_boundary_inclusive(self):
        anchors = [(np.zeros(3), np.zeros(3)), (np.array([1.0, 0, 0]), np.array([1.0, 0, 0])),
                   (np.array([0, 1.0, 0]), np.array([0, 1.0, 0]))]
        c_lib = np.array([2.0, 2.0, 0.0])
        v = detect_changes([("q", c_lib + np.array([0.0, 0, 0.02]), c_lib)], anchors, 0.02)
        assert v == {"q": False}

    def test_two_anchors_translation_only(self):
        rng = np.random.default_rng(6)
        shift = np.array([0.3, -0.2, 0.1])
        anchors = [(c + shift, c) for c in [rng.uniform(0, 5, 3) for _ in range(2)]]
        c_lib = rng.uniform(0, 5, 3)
        assert detect_changes([("q", c_lib + shift, c_lib)], anchors, 0.02) == {"q": False}
        assert detect_changes([("q", c_lib + shift + np.array([0.4, 0, 0]), c_lib)], anchors, 0.02) == {"q": True}

    def test_bad_delta_raises(self):
        with pytest.raises(ValueError):
            detect_changes([], [(np.zeros(3), np.zeros(3))], 0.0)


class TestProvisionalTracker:
    class Obs:
        def __init__(self, oid, latent, rng_m=1.0, n=500):
            self.observation_id = oid
            self.latent = latent
            self.range_m = rng_m
            self.visible_count = n

    def obs(self, rng_m=1.0, n=500):
        z = LatentCode(MUG.latent + np.array([0.0, 0, 1.0]), "camera:0")
        return self.Obs("o", z, rng_m, n)

    def test_three_in_a_row_instantiates(self):
        tr = ProvisionalTracker()
        cam = Pose3.identity()
        assert tr.update([self.obs()], cam) == []
        assert tr.update([self.obs()], cam) == []
        ready = tr.update([self.obs()], cam)
        assert len(ready) == 1

    def test_streak_resets_when_missed(self):
        tr = ProvisionalTracker()
        cam = Pose3.identity()
        tr.update([self.obs()], cam)
        tr.update([self.obs()], cam)
        tr.update([], cam)  # missed a frame
        assert tr.update([self.obs()], cam) == []

    def test_range_gate(self):
        tr = ProvisionalTracker()
        cam = Pose3.identity()
        for _ in range(5):
            assert tr.update([self.obs(rng_m=2.5)], cam) == []

    def test_point_count_gate(self):
        tr = ProvisionalTracker()
        cam = Pose3.identity()
        for _ in range(5):
            assert tr.update([self.obs(n=50)], cam) == []


def covers_factory(visible_centers, frames):
    centers = [np.asarray(c) for c in visible_centers]

    def covers(frame, center):
        return frame in frames and any(np.linalg.norm(center - c) < 0.5 for c in centers)

    return covers


class TestRemoval:
    def test_unmatched_over_covered_loop_span_removed(self):
        rng = np.random.default_rng(7)
        pose = Pose3.identity()
        wpose = Pose3(np.eye(3), np.array([1.0, 2.0, 0.8]))
        lib = make_library([(MUG, wpose, 0, pose)])
        covers = covers_factory([wpose.apply(MUG.latent).mean(axis=0)], set(range(100, 110)))
        removed = mark_removed(lib, [(100, 109)], covers)
        assert removed == [0]
        assert lib.records[0].status == STATUS_REMOVED
        assert lib.live() == []

    def test_never_revisited_keeps_status(self):
        pose = Pose3.identity()
        wpose = Pose3(np.eye(3), np.array([1.0, 2.0, 0.8]))
        lib = make_library([(MUG, wpose, 0, pose)])
        covers = covers_factory([np.array([9.0, 9.0, 9.0])], set(range(100, 110)))
        assert mark_removed(lib, [(100, 109)], covers) == []
        assert lib.records[0].status == STATUS_UNCHANGED

    def test_matched_during_revisit_not_removed(self):
        pose = Pose3.identity()
        wpose = Pose3(np.eye(3), np.array([1.0, 2.0, 0.8]))
        lib = make_library([(MUG, wpose, 0, pose)])
        lib.records[0].matched_frames.add(105)
        covers = covers_factory([wpose.apply(MUG.latent).mean(axis=0)], set(range(100, 110)))
        assert mark_removed(lib, [(100, 109)], covers) == []


class TestMaintainMap:
    def test_partial_duplicate_deleted(self):
        pose = Pose3.identity()
        wpose = Pose3(np.eye(3), np.array([1.0, 1.0, 0.8]))
        lib = make_library([(MUG, wpose, 0, pose), (MUG, wpose, 1, pose)])
        out = maintain_map(lib, MODELS)
        # identical reconstructions: the later record is the duplicate
        assert out["duplicates"] == [1] or out["duplicates"] == [0]
        assert len(lib.live()) == 1

    def test_changed_object_rehomes_stale_record(self):
        pose = Pose3.identity()
        mug2 = [m for m in CATALOG if not m.ambiguous][1]
        wa = Pose3(np.eye(3), np.array([1.0, 1.0, 0.8]))
        lib = make_library([(MUG, wa, 0, pose), (mug2, Pose3(np.eye(3), np.array([4.0, 4.0, 0.8])), 1, pose)])
        # first mug moves onto the second mug's old spot (partial box overlap)
        moved = Pose3(np.eye(3), np.array([4.0, 4.0, 0.8]))
        z = camera_latent(MUG, moved, pose, frame="camera:2")
        lib.mark_changed(0, 50, z, 2, pose)
        out = maintain_map(lib, MODELS)
        assert out["rehomed"] == [(0, 1)]
        assert 1 not in lib.records and 0 in lib.records

    def test_disjoint_records_untouched(self):
        pose = Pose3.identity()
        lib = make_library(
            [(MUG, Pose3(np.eye(3), np.array([1.0, 1.0, 0.8])), 0, pose),
             (BOTTLE, Pose3(np.eye(3), np.array([4.0, 4.0, 0.8])), 1, pose)]
        )
        out = maintain_map(lib, MODELS)
        assert out == {"duplicates": [], "rehomed": []}
        assert len(lib.live()) == 2

    def test_invariants_after_maintenance(self):
        pose = Pose3.identity()
        lib = make_library(
            [(MUG, Pose3(np.eye(3), np.array([1.0, 1.0, 0.8])), 0, pose),
             (MUG, Pose3(np.eye(3), np.array([1.0, 1.0, 0.8])), 1, pose),
             (BOTTLE, Pose3(np.eye(3), np.array([4.0, 4.0, 0.8])), 2, pose)]
        )
        maintain_map(lib, MODELS)
        from objslam.models import decode_reconstruction

        boxes = [aabb(decode_reconstruction(r.world_latent, MODELS[r.model_key])) for r in lib.live()]
        for i in range(len(boxes)):
            for j in range(len(boxes)):
                if i != j and boxes[i].volume <= boxes[j].volume:
                    assert overlap_fraction(boxes[i], boxes[j]) < 0.95


class TestPersistenceAndExport:
    def build(self):
        rng = np.random.default_rng(8)
        pose = Pose3.random(rng)
        lib = make_library(
            [(MUG, Pose3.random(rng), 0, pose), (BOTTLE, Pose3(so3_exp(np.array([0.3, 0, 0])), np.array([2.0, 1.0, 0.9])), 1, pose)]
        )
        lib.records[1].status = STATUS_CHANGED
        lib.records[1].changed_at = 42
        return lib

    def test_checkpoint_round_trip(self, tmp_path):
        lib = self.build()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        lib.checkpoint(p1)
        ObjectLibrary.load(p1).checkpoint(p2)
        assert p1.read_bytes() == p2.read_bytes()
        lib2 = ObjectLibrary.load(p1)
        assert lib2.records[1].status == STATUS_CHANGED and lib2.records[1].changed_at == 42
        assert np.array_equal(lib2.records[0].world_latent.points, lib.records[0].world_latent.points)

    def test_export_writes_ply_and_index(self, tmp_path):
        lib = self.build()
        idx = export_map(lib, MODELS, tmp_path / "map")
        index = json.loads(idx.read_text())
        assert [e["object_id"] for e in index] == [0, 1]
        assert index[1]["status"] == STATUS_CHANGED
        ply = (tmp_path / "map" / index[0]["file"]).read_text().splitlines()
        assert ply[0] == "ply" and ply[1] == "format ascii 1.0"
        n = int(ply[2].split()[-1])
        assert len(ply) == 7 + n

    def test_removed_records_excluded_from_export(self, tmp_path):
        lib = self.build()
        lib.records[0].status = STATUS_REMOVED
        idx = export_map(lib, MODELS, tmp_path / "map")
        index = json.loads(idx.read_text())
        assert [e["object_id"] for e in index] == [1]

    def test_export_deterministic(self, tmp_path):
        lib = self.build()
        export_map(lib, MODELS, tmp_path / "m1")
        export_map(lib, MODELS, tmp_path / "m2")
        assert (tmp_path / "m1" / "map_index.json").read_bytes() == (tmp_path / "m2" / "map_index.json").read_bytes()
        assert (tmp_path / "m1" / "object_0000.ply").read_bytes() == (tmp_path / "m2" / "object_0000.ply").read_bytes()
