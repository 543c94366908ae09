"""Keyframe pose graph and its Levenberg-Marquardt optimizer.

Vertices are keyframe camera poses (world-from-camera). Edge kinds: external
odometry, latent-derived short-range (sliding window) and latent-derived
long-range loop closures. Edge measurement convention: Z_ij maps keyframe-j
camera coordinates into keyframe-i camera coordinates, so the residual is
e_ij = log(Z_ij * Tj^-1 * Ti)^vee, zero when Z_ij = Ti^-1 * Tj.

Solves are damped Gauss-Newton on the product manifold with right
perturbations T <- T*exp(delta); analytic Jacobians J_i = Jr^-1(e),
J_j = -Jr^-1(e) * Ad(Ti^-1 Tj). Local solves pin the oldest in-window pose
and treat out-of-window endpoints as fixed; global solves pin the first
vertex (the gauge prior).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .geometry import Pose3, alignment_residual, se3_right_jacobian_inv
from .models import LatentCode, align_latent_sets, _ring_roll

EDGE_ODOM = "ExternalOdometry"
EDGE_LOCAL = "LatentLocal"
EDGE_LOOP = "LatentLoop"

KEYFRAME_MIN_TRANSLATION = 0.04  # meters of accumulated odometry


@dataclass
class Keyframe:
    kf_id: int
    frame_index: int
    pose: Pose3  # current estimate, world-from-camera
    latents: dict[int, LatentCode] = field(default_factory=dict)  # object id ->
    ambiguous: dict[int, bool] = field(default_factory=dict)
    odom_dist: float = 0.0
    # quaternion as read from a dump file; preserves byte-identical re-export
    # (matrix <-> quaternion conversion is not bit-idempotent)
    quat: np.ndarray | None = None


@dataclass(frozen=True)
class PoseGraphEdge:
    i: int
    j: int
    Z: Pose3
    kind: str
    weight: np.ndarray  # 6x6 SPD information
    quat: np.ndarray | None = None  # see Keyframe.quat

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("self edge")
        W = np.asarray(self.weight, float)
        if W.shape != (6, 6) or not np.allclose(W, W.T) or np.any(np.linalg.eigvalsh(W) <= 0):
            raise ValueError("weight must be symmetric positive-definite")


def odometry_weight(sigma_rot: float, sigma_t: float) -> np.ndarray:
    sr = max(sigma_rot, 1e-6)
    st = max(sigma_t, 1e-6)
    return np.diag([1 / sr**2] * 3 + [1 / st**2] * 3)


def latent_weight(sigma_latent: float) -> np.ndarray:
    return np.eye(6) / (sigma_latent**2 + 1e-6)


def residual(edge: PoseGraphEdge, Ti: Pose3, Tj: Pose3) -> np.ndarray:
    return (edge.Z @ Tj.inverse() @ Ti).log()


def residual_jacobians(edge: PoseGraphEdge, Ti: Pose3, Tj: Pose3):
    """(e, de/d(delta_i), de/d(delta_j)) under right perturbations."""
    A = Ti.inverse() @ Tj
    e = (edge.Z @ A.inverse()).log()
    Jr_inv = se3_right_jacobian_inv(e)
    return e, Jr_inv, -Jr_inv @ A.adjoint()


def numeric_jacobians(edge: PoseGraphEdge, Ti: Pose3, Tj: Pose3, eps: float = 1e-6):
    """Central finite differences; reference implementation for the analytic path."""
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        Ji[:, k] = (
            residual(edge, Ti @ Pose3.exp(d), Tj) - residual(edge, Ti @ Pose3.exp(-d), Tj)
        ) / (2 * eps)
        Jj[:, k] = (
            residual(edge, Ti, Tj @ Pose3.exp(d)) - residual(edge, Ti, Tj @ Pose3.exp(-d))
        ) / (2 * eps)
    return Ji, Jj


@dataclass
class SolveInfo:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    accepted_costs: list[float] = field(default_factory=list)


class PoseGraph:
    def __init__(self):
        self.keyframes: dict[int, Keyframe] = {}
        self.edges: list[PoseGraphEdge] = []
        self._next_id = 0

    @property
    def kf_ids(self) -> list[int]:
        return sorted(self.keyframes)

    def latest(self) -> Keyframe | None:
        return self.keyframes[self._next_id - 1] if self._next_id else None

    def maybe_add_keyframe(
        self,
        frame_index: int,
        pose: Pose3,
        latents: dict[int, LatentCode],
        ambiguous: dict[int, bool],
        has_new_objects: bool,
        accumulated_odometry: float,
        change_flag: bool = False,
    ) -> Keyframe | None:
        """Keyframe iff new objects, >= 0.04 m accumulated travel, or a
        change-detection flag for this frame."""
        prev = self.latest()
        if prev is not None and frame_index <= prev.frame_index:
            raise ValueError("frame indices must increase")
        if prev is not None and not (
            has_new_objects or accumulated_odometry >= KEYFRAME_MIN_TRANSLATION or change_flag
        ):
            return None
        if prev is None and not (has_new_objects or change_flag):
            # bootstrap on the first frame that observes anything
            if not latents:
                return None
        kf = Keyframe(self._next_id, frame_index, pose, dict(latents), dict(ambiguous), accumulated_odometry)
        self.keyframes[kf.kf_id] = kf
        self._next_id += 1
        return kf

    def add_edge(self, edge: PoseGraphEdge) -> None:
        if edge.i not in self.keyframes or edge.j not in self.keyframes:
            raise KeyError("edge endpoint not in graph")
        self.edges.append(edge)

    # -- latent-derived constraints -----------------------------------------

    def _shared_alignment(self, i: int, j: int, sigma_latent: float):
        """Joint alignment of the objects shared by keyframes i and j; maps
        j-frame latent coordinates into the i frame.

        Usability rule: at least one shared unambiguous object, or at least
        two shared ambiguous ones with a non-degenerate joint alignment.
        Objects whose points do not fit the joint solution (mis-oriented
        re-detections) are dropped one at a time; the edge is rejected when
        the residual still exceeds the gate."""
        a, b = self.keyframes[i], self.keyframes[j]
        shared = sorted(set(a.latents) & set(b.latents))
        gate = 10.0 * sigma_latent if sigma_latent > 0 else 1e-9

        def usable(ids):
            n_plain = sum(1 for o in ids if not a.ambiguous[o])
            return n_plain >= 1 or (len(ids) - n_plain) >= 2

        while shared and usable(shared):
            src = [b.latents[o].points for o in shared]
            dst = [a.latents[o].points for o in shared]
            amb = [a.ambiguous[o] for o in shared]
            T, rms, degenerate = align_latent_sets(src, dst, amb)
            if degenerate:
                return None
            if rms <= gate:
                return T
            if len(shared) < 2:
                return None
            # drop the worst-fitting object and retry
            worst, worst_r = None, -1.0
            for o, s, d, am in zip(shared, src, dst, amb):
                if am:
                    s = _best_ring_fit(T, s, d)
                r = alignment_residual(T, s, d)
                if r > worst_r:
                    worst, worst_r = o, r
            shared = [o for o in shared if o != worst]
        return None

    def build_local_constraints(self, kf_id: int, window: int, sigma_latent: float) -> list[PoseGraphEdge]:
        """One LatentLocal edge to each of the preceding window-1 keyframes
        that shares enough usable objects."""
        W = latent_weight(sigma_latent)
        out = []
        for i in range(max(0, kf_id - (window - 1)), kf_id):
            Z = self._shared_alignment(i, kf_id, sigma_latent)
            if Z is not None:
                out.append(PoseGraphEdge(i, kf_id, Z, EDGE_LOCAL, W))
        return out

    def build_loop_constraints(
        self,
        kf_id: int,
        periods: dict[int, list[tuple[int, int]]],
        redetected: list[int],
        sigma_latent: float,
    ) -> list[PoseGraphEdge]:
        """On re-detection after a gap: one LatentLoop edge from the first
        keyframe of each of the object's previous observable periods to the
        current keyframe. ``periods`` maps object id -> [(start_kf, end_kf)]
        excluding the period the current keyframe belongs to."""
        W = latent_weight(sigma_latent)
        targets = sorted({p[0] for o in redetected for p in periods.get(o, [])})
        out = []
        for i in targets:
            if i >= kf_id:
                continue
            Z = self._shared_alignment(i, kf_id, sigma_latent)
            if Z is not None:
                out.append(PoseGraphEdge(i, kf_id, Z, EDGE_LOOP, W))
        return out

    # -- optimization --------------------------------------------------------

    def optimize_local(self, window: int, **kw) -> SolveInfo:
        ids = self.kf_ids[-window:]
        if len(ids) < 2:
            return SolveInfo(0, 0.0, 0.0, True)
        return self._solve(free_ids=ids[1:], scope=set(ids), **kw)

    def optimize_global(self, **kw) -> SolveInfo:
        ids = self.kf_ids
        if len(ids) < 2:
            return SolveInfo(0, 0.0, 0.0, True)
        return self._solve(free_ids=ids[1:], scope=set(ids), **kw)

    def _solve(self, free_ids, scope, max_iters: int = 100, tol: float = 1e-8) -> SolveInfo:
        free = [k for k in free_ids]
        # keep boundary edges: endpoints outside the scope stay fixed anchors
        edges = [e for e in self.edges if (e.i in scope) or (e.j in scope)]
        touched = set(scope) | {e.i for e in edges} | {e.j for e in edges}
        fixed = [k for k in touched if k not in set(free)]
        _check_connected(free, fixed, edges)
        idx = {k: n for n, k in enumerate(free)}
        poses = {k: self.keyframes[k].pose for k in touched}

        def total_cost(ps):
            c = 0.0
            for e in edges:
                r = residual(e, ps[e.i], ps[e.j])
                c += float(r @ e.weight @ r)
            return c

        def build_system(ps):
            n = len(free)
            rows, cols, vals = [], [], []
            bvec = np.zeros(6 * n)
            c = 0.0
            for e in edges:
                r, Ji, Jj = residual_jacobians(e, ps[e.i], ps[e.j])
                W = e.weight
                c += float(r @ W @ r)
                blocks = []
                if e.i in idx:
                    blocks.append((idx[e.i], Ji))
                if e.j in idx:
                    blocks.append((idx[e.j], Jj))
                for bi, Jb in blocks:
                    bvec[6 * bi : 6 * bi + 6] += Jb.T @ W @ r
                    for bj, Jc in blocks:
                        blk = Jb.T @ W @ Jc
                        rr, cc = np.meshgrid(np.arange(6) + 6 * bi, np.arange(6) + 6 * bj, indexing="ij")
                        rows.append(rr.ravel())
                        cols.append(cc.ravel())
                        vals.append(blk.ravel())
            H = scipy.sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(6 * n, 6 * n),
            ) if rows else scipy.sparse.csr_matrix((6 * n, 6 * n))
            return c, H, bvec

        cost = total_cost(poses)
        info = SolveInfo(0, cost, cost, False, [cost])
        # numerical floor: residuals of exactly-consistent measurements are
        # ~1e-15, i.e. per-edge costs around 1e-18 under the stiffest weights
        floor = 1e-16 * max(1, len(edges))
        if cost < floor or not free:
            info.converged = True
            return info
        lam = 1e-6
        eye = scipy.sparse.identity(6 * len(free), format="csr")
        for it in range(max_iters):
            cost, H, b = build_system(poses)
            accepted = False
            for _ in range(25):
                try:
                    dx = scipy.sparse.linalg.spsolve((H + lam * eye).tocsc(), -b)
                except Exception:
                    lam *= 10
                    continue
                trial = dict(poses)
                for k, n in idx.items():
                    trial[k] = poses[k] @ Pose3.exp(dx[6 * n : 6 * n + 6])
                new_cost = total_cost(trial)
                if new_cost <= cost:
                    poses = trial
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    info.accepted_costs.append(new_cost)
                    break
                lam *= 10
            info.iterations = it + 1
            if not accepted:
                # no damping level reduces the cost: numerical local minimum
                info.converged = True
                break
            if np.max(np.abs(dx)) < tol:
                info.converged = True
                break
            if info.accepted_costs[-1] < floor:
                info.converged = True
                break
        info.final_cost = info.accepted_costs[-1]
        for k in free:
            self.keyframes[k].pose = poses[k]
        return info

    # -- serialization -------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        lines = []
        for k in self.kf_ids:
            kf = self.keyframes[k]
            t = kf.pose.t
            q = kf.quat if kf.quat is not None else kf.pose.quaternion()
            lines.append(
                "VERTEX %d %s %s %s %s %s %s %s"
                % (k, repr(float(t[0])), repr(float(t[1])), repr(float(t[2])), repr(float(q[0])), repr(float(q[1])), repr(float(q[2])), repr(float(q[3])))
            )
        for e in self.edges:
            t = e.Z.t
            q = e.quat if e.quat is not None else e.Z.quaternion()
            lines.append(
                "EDGE %s %d %d %s %s %s %s %s %s %s"
                % (e.kind, e.i, e.j, repr(float(t[0])), repr(float(t[1])), repr(float(t[2])), repr(float(q[0])), repr(float(q[1])), repr(float(q[2])), repr(float(q[3])))
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path: str | Path, sigma_latent: float = 0.0, sigma_rot: float = 0.003, sigma_t: float = 0.05) -> "PoseGraph":
        g = PoseGraph()
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "VERTEX":
                kid = int(parts[1])
                t = np.array([float(x) for x in parts[2:5]])
                q = np.array([float(x) for x in parts[5:9]])
                g.keyframes[kid] = Keyframe(kid, kid, Pose3.from_quaternion(q, t), quat=q)
                g._next_id = max(g._next_id, kid + 1)
            elif parts[0] == "EDGE":
                kind = parts[1]
                i, j = int(parts[2]), int(parts[3])
                t = np.array([float(x) for x in parts[4:7]])
                q = np.array([float(x) for x in parts[7:11]])
                W = odometry_weight(sigma_rot, sigma_t) if kind == EDGE_ODOM else latent_weight(sigma_latent)
                g.edges.append(PoseGraphEdge(i, j, Pose3.from_quaternion(q, t), kind, W, quat=q))
        return g


def _best_ring_fit(T: Pose3, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Ring-roll of src minimizing the residual under T (ambiguous members)."""
    from .models import RING_SIZE

    best, best_r = src, np.inf
    for k in range(RING_SIZE):
        cand = _ring_roll(src, k)
        r = alignment_residual(T, cand, dst)
        if r < best_r:
            best, best_r = cand, r
    return best


def _check_connected(free, fixed, edges):
    """Every free vertex must reach a fixed/pinned vertex through scope edges."""
    if not free:
        return
    adj: dict[int, list[int]] = {}
    for e in edges:
        adj.setdefault(e.i, []).append(e.j)
        adj.setdefault(e.j, []).append(e.i)
    seen = set(fixed)
    queue = deque(fixed)
    if not fixed:
        seen = {free[0]}
        queue = deque([free[0]])
    while queue:
        v = queue.popleft()
        for w in adj.get(v, []):
            if w not in seen:
                seen.add(w)
                queue.append(w)
    missing = [v for v in free if v not in seen]
    if missing:
        raise ValueError(f"solve scope disconnected: vertices {missing} unreachable")


__all__ = [
    "EDGE_LOCAL",
    "EDGE_LOOP",
    "EDGE_ODOM",
    "KEYFRAME_MIN_TRANSLATION",
    "Keyframe",
    "PoseGraph",
    "PoseGraphEdge",
    "SolveInfo",
    "latent_weight",
    "numeric_jacobians",
    "odometry_weight",
    "residual",
    "residual_jacobians",
]
