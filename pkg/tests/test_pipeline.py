import numpy as np
import pytest

from objslam.evalmetrics import ate_rmse, change_pr, rpe_trans_rmse
from objslam.models import generate_catalog
from objslam.pipeline import (
    MODE_ALL_OBJECT,
    MODE_FUSED,
    MODE_MUG_ONLY,
    RunConfig,
    SlamRunner,
    run_slam,
    write_artifacts,
)
from objslam.posegraph import EDGE_ODOM
from objslam.scene import (
    SceneConfig,
    TrajectoryConfig,
    corrupt_odometry,
    dead_reckon,
    generate_scene,
    generate_trajectory,
)

CATALOG = generate_catalog(3, 16)
TRAJ = generate_trajectory(TrajectoryConfig(laps=2))
LAP = len(TRAJ) // 2


def small_scene(seed, n_changes=3, n_decoys=1, n_tables=4, n_objects=8):
    cfg = SceneConfig(
        n_tables=n_tables,
        n_objects=n_objects,
        n_changes=n_changes,
        n_decoys=n_decoys,
        n_frames=len(TRAJ),
        change_window=(LAP - 20, LAP - 5),
    )
    return generate_scene(cfg, CATALOG, seed)


@pytest.fixture(scope="module")
def zero_noise_run():
    script = small_scene(1)
    result = run_slam(script, TRAJ, CATALOG, RunConfig(mode=MODE_ALL_OBJECT, seed=1))
    return script, result


class TestZeroNoiseEndToEnd:
    def test_trajectory_exact(self, zero_noise_run):
        _, result = zero_noise_run
        ate, _ = ate_rmse(result.estimate, TRAJ.poses)
        rpe, _ = rpe_trans_rmse(result.estimate, TRAJ.poses)
        assert ate < 1e-9
        assert rpe < 1e-9

    def test_all_changes_detected_exactly(self, zero_noise_run):
        script, result = zero_noise_run
        events = [(e.model_id, e.frame_index) for e in script.events]
        tp, fp, fn, precision, recall = change_pr(result.detections, events)
        assert (tp, fp, fn) == (3, 0, 0)
        assert precision == 1.0 and recall == 1.0

    def test_no_solver_warnings(self, zero_noise_run):
        _, result = zero_noise_run
        assert result.solver_warnings == 0

    def test_moved_record_rehomed(self, zero_noise_run):
        script, result = zero_noise_run
        move = next(e for e in script.events if e.kind == "move")
        rec = next(
            r for r in result.library.records.values() if r.model_key == move.model_id
        )
        assert np.linalg.norm(rec.last_center() - move.new_pose.t) < 0.05

    def test_removed_record_marked(self, zero_noise_run):
        script, result = zero_noise_run
        gone = next(e for e in script.events if e.kind == "remove")
        rec = next(
            r for r in result.library.records.values() if r.model_key == gone.model_id
        )
        assert rec.removed

    def test_added_object_instantiated(self, zero_noise_run):
        script, result = zero_noise_run
        added = next(e for e in script.events if e.kind == "add")
        keys = {r.model_key for r in result.library.live()}
        assert added.model_id in keys


class TestMapping:
    def test_static_scene_maps_every_object(self):
        script = small_scene(4, n_changes=0, n_decoys=0)
        result = run_slam(script, TRAJ, CATALOG, RunConfig(mode=MODE_ALL_OBJECT, seed=4))
        assert result.detections == []
        placed = {p.model_id: p for p in script.placements}
        live = result.library.live()
        assert sorted(r.model_key for r in live) == sorted(placed)
        for r in live:
            assert np.linalg.norm(r.last_center() - placed[r.model_key].pose.t) < 0.05

    def test_decoy_alone_produces_no_detection(self):
        script = small_scene(6, n_changes=0, n_decoys=1)
        assert script.decoys
        result = run_slam(script, TRAJ, CATALOG, RunConfig(mode=MODE_ALL_OBJECT, seed=6))
        assert result.detections == []
        assert all(not r.removed for r in result.library.records.values())


class TestModes:
    def test_mug_only_ignores_ambiguous(self):
        script = small_scene(3, n_changes=0, n_decoys=0)
        mug = run_slam(script, TRAJ, CATALOG, RunConfig(mode=MODE_MUG_ONLY, seed=3))
        both = run_slam(script, TRAJ, CATALOG, RunConfig(mode=MODE_ALL_OBJECT, seed=3))
        assert all(not r.ambiguous for r in mug.library.records.values())
        assert any(r.ambiguous for r in both.library.records.values())
        assert len(both.library.records) > len(mug.library.records)

    def test_fused_has_odometry_edge_per_keyframe_pair(self):
        script = small_scene(5, n_changes=0, n_decoys=0)
        runner = SlamRunner(script, TRAJ, CATALOG, RunConfig(mode=MODE_FUSED, seed=5))
        result = runner.run()
        n_kf = len(runner.graph.kf_ids)
        odom = [e for e in runner.graph.edges if e.kind == EDGE_ODOM]
        assert len(odom) == n_kf - 1

    def test_objects_only_uses_fewer_odometry_edges(self):
        script = small_scene(5, n_changes=0, n_decoys=0)
        fused = SlamRunner(script, TRAJ, CATALOG, RunConfig(mode=MODE_FUSED, seed=5))
        fused.run()
        objs = SlamRunner(script, TRAJ, CATALOG, RunConfig(mode=MODE_ALL_OBJECT, seed=5))
        objs.run()
        n_odom_fused = sum(e.kind == EDGE_ODOM for e in fused.graph.edges)
        n_odom_objs = sum(e.kind == EDGE_ODOM for e in objs.graph.edges)
        assert n_odom_objs < n_odom_fused

    def test_fused_beats_dead_reckoning_under_noise(self):
        script = small_scene(1, n_changes=0, n_decoys=0)
        noise = dict(sigma_rot=0.003, sigma_t=0.05, sigma_latent=0.001)
        result = run_slam(script, TRAJ, CATALOG, RunConfig(mode=MODE_FUSED, seed=1, **noise))
        fused_ate, _ = ate_rmse(result.estimate, TRAJ.poses)
        odo = corrupt_odometry(TRAJ, noise["sigma_rot"], noise["sigma_t"], 1)
        dr_ate, _ = ate_rmse(dead_reckon(TRAJ.poses[0], odo), TRAJ.poses)
        assert fused_ate < dr_ate


class TestDeterminism:
    def test_artifacts_byte_identical(self, tmp_path):
        script = small_scene(2)
        cfg = RunConfig(mode=MODE_ALL_OBJECT, seed=2)
        a = run_slam(script, TRAJ, CATALOG, cfg)
        b = run_slam(script, TRAJ, CATALOG, cfg)
        write_artifacts(a, CATALOG, tmp_path / "a")
        write_artifacts(b, CATALOG, tmp_path / "b")
        for name in ("trajectory.txt", "pose_graph.txt", "library.json", "map/map_index.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestConfigValidation:
    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            RunConfig(mode="walking")

    def test_small_window_rejected(self):
        with pytest.raises(ValueError):
            RunConfig(window=1)
