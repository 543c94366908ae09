"""Trajectory and change-detection evaluation.

ATE: rigid (no-scale) alignment of estimated positions onto ground truth,
then RMSE of the position residuals. RPE: per-step relative-translation error
magnitudes, no alignment. Change detection: precision/recall against the
scenario's scripted events.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose3, horn_align


@dataclass
class MetricsReport:
    ate_rmse: float
    rpe_trans_rmse: float
    ate_series: list[float] = field(default_factory=list)
    rpe_series: list[float] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float | None:
        return None if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return None if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    def to_json(self, path: str | Path) -> None:
        out = {
            "ate_rmse": self.ate_rmse,
            "rpe_trans_rmse": self.rpe_trans_rmse,
            "change": {
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "precision": self.precision,
                "recall": self.recall,
            },
            "ate_series": [round(float(x), 12) for x in self.ate_series],
            "rpe_series": [round(float(x), 12) for x in self.rpe_series],
        }
        Path(path).write_text(json.dumps(out, indent=1))


def _positions(trajectory) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, float)
    return np.array([p.t for p in trajectory], float)


def ate_rmse(estimate, ground_truth) -> tuple[float, np.ndarray]:
    """RMSE of position residuals after rigid Horn alignment on positions."""
    est, gt = _positions(estimate), _positions(ground_truth)
    if est.shape != gt.shape:
        raise ValueError("trajectory length mismatch")
    if est.shape[0] < 2:
        raise ValueError("need at least two poses")
    T, _ = horn_align(est, gt)
    series = np.linalg.norm(T.apply(est) - gt, axis=1)
    return float(np.sqrt(np.mean(series**2))), series


def rpe_trans_rmse(estimate, ground_truth, step: int = 1) -> tuple[float, np.ndarray]:
    """RMSE of per-step relative-translation error magnitudes."""
    if len(estimate) != len(ground_truth):
        raise ValueError("trajectory length mismatch")
    if len(estimate) < step + 1:
        raise ValueError("trajectory shorter than the step")
    errs = []
    for k in range(len(estimate) - step):
        d_est = estimate[k].inverse() @ estimate[k + step]
        d_gt = ground_truth[k].inverse() @ ground_truth[k + step]
        errs.append(np.linalg.norm(d_est.t - d_gt.t))
    series = np.array(errs)
    return float(np.sqrt(np.mean(series**2))), series


def change_pr(
    detections: list[tuple[str, int]],
    events: list[tuple[str, int]],
    frame_tolerance: int | None = None,
) -> tuple[int, int, int, float | None, float | None]:
    """Match detections (model key, frame) against scripted change events.

    A detection is a true positive when an event with the same model key
    exists, no earlier than ``frame_tolerance`` frames after the detection
    (default: any event at or before the detection — same epoch). Each event
    is consumed by at most one detection."""
    remaining = sorted(events, key=lambda e: (e[1], e[0]))
    tp = fp = 0
    for key, frame in sorted(detections, key=lambda d: (d[1], d[0])):
        hit = None
        for e in remaining:
            if e[0] != key:
                continue
            if e[1] > frame:
                continue  # detection cannot precede the physical change
            if frame_tolerance is not None and frame - e[1] > frame_tolerance:
                continue
            hit = e
            break
        if hit is None:
            fp += 1
        else:
            remaining.remove(hit)
            tp += 1
    fn = len(remaining)
    precision = None if tp + fp == 0 else tp / (tp + fp)
    recall = None if tp + fn == 0 else tp / (tp + fn)
    return tp, fp, fn, precision, recall


def write_trajectory_csv(path: str | Path, ground_truth, estimate, report: MetricsReport) -> None:
    """Aligned-trajectory CSV: frame, gt_xyz, est_xyz, ate, rpe."""
    gt, est = _positions(ground_truth), _positions(estimate)
    lines = ["frame,gt_x,gt_y,gt_z,est_x,est_y,est_z,ate,rpe"]
    for k in range(gt.shape[0]):
        rpe = report.rpe_series[k - 1] if 0 < k <= len(report.rpe_series) else ""
        lines.append(
            "%d,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%s"
            % (k, *gt[k], *est[k], report.ate_series[k], "" if rpe == "" else "%.9f" % rpe)
        )
    Path(path).write_text("\n".join(lines) + "\n")


__all__ = [
    "MetricsReport",
    "ate_rmse",
    "change_pr",
    "rpe_trans_rmse",
    "write_trajectory_csv",
]
