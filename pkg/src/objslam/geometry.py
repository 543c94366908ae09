"""Rigid-body math: SO(3)/SE(3) maps, Horn alignment, Chamfer distance, AABBs.

Twist ordering is (rotation, translation): xi = [wx, wy, wz, vx, vy, vz],
rotations in radians, translations in meters. All functions are pure and all
values are treated as immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

# Relative singular-value gap below which a Horn cross-covariance is reported
# as rank-deficient (collinear / coincident / planar input).
DEGENERACY_GAP = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series-expanded near zero."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R. Principal branch; the angle-pi case returns a
    deterministically signed axis (branch chosen by largest axis component)."""
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    if theta < 1e-8:
        # First-order: vee of the skew part.
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # Near pi the skew part vanishes; recover the axis from R + I.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] < 1e-12:
            return np.zeros(3)
        axis = A[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        # Fix the sign convention so the result is deterministic.
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0:
            axis = -axis
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = theta / 2.0
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * K + (1.0 - cot) / theta**2 * (K @ K)


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform on SE(3): p_out = R @ p_in + t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose3":
        xi = np.asarray(xi, dtype=float)
        phi, rho = xi[:3], xi[3:]
        return Pose3(so3_exp(phi), so3_left_jacobian(phi) @ rho)

    def log(self) -> np.ndarray:
        phi = so3_log(self.R)
        rho = so3_left_jacobian_inv(phi) @ self.t
        return np.concatenate([phi, rho])

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return Pose3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose3":
        return Pose3(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array or a single 3-vector."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.R)))

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for (rot, trans) twist ordering."""
        A = np.zeros((6, 6))
        A[:3, :3] = self.R
        A[3:, 3:] = self.R
        A[3:, :3] = hat(self.t) @ self.R
        return A

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Pose3":
        M = np.asarray(M, dtype=float)
        return Pose3(M[:3, :3], M[:3, 3])

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
        from scipy.spatial.transform import Rotation

        q = Rotation.from_matrix(self.R).as_quat()
        if q[3] < 0:
            q = -q
        return q

    @staticmethod
    def from_quaternion(q: np.ndarray, t: np.ndarray) -> "Pose3":
        from scipy.spatial.transform import Rotation

        return Pose3(Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix(), t)

    @staticmethod
    def random(rng: np.random.Generator, max_angle: float = 3.0, max_trans: float = 1.0) -> "Pose3":
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, max_angle)
        t = rng.uniform(-max_trans, max_trans, size=3)
        return Pose3(so3_exp(angle * axis), t)

    def is_close(self, other: "Pose3", tol: float = 1e-9) -> bool:
        dR = (self.inverse() @ other).rotation_angle()
        dt = float(np.linalg.norm(self.t - other.t))
        return dR < tol and dt < tol


def se3_Q_matrix(xi: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (Barfoot's Q)."""
    phi, rho = np.asarray(xi[:3], float), np.asarray(xi[3:], float)
    th = np.linalg.norm(phi)
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = P @ Rh @ P
    if th < 1e-4:
        # Series coefficients of the closed form below.
        c1 = 1.0 / 6.0 - th**2 / 120.0
        c2 = 1.0 / 24.0 - th**2 / 720.0
        c3 = 1.0 / 120.0 - th**2 / 2520.0
    else:
        c1 = (th - np.sin(th)) / th**3
        c2 = (1.0 - th**2 / 2.0 - np.cos(th)) / th**4
        c3 = 0.5 * (c2 - 3.0 * (th - np.sin(th) - th**3 / 6.0) / th**5)
    Q = 0.5 * Rh
    Q += c1 * (PR + RP + PRP)
    Q -= c2 * (P @ P @ Rh + Rh @ P @ P - 3.0 * PRP)
    Q -= c3 * (PRP @ P + P @ PRP)
    return Q


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse SE(3) left Jacobian for (rot, trans) ordering."""
    phi = np.asarray(xi[:3], float)
    Jinv = so3_left_jacobian_inv(phi)
    Q = se3_Q_matrix(xi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def horn_align(src: np.ndarray, dst: np.ndarray) -> tuple[Pose3, bool]:
    """Closed-form least-squares rigid alignment with index correspondence.

    Returns (T, degenerate) where T minimizes sum ||T(src_i) - dst_i||^2.
    ``degenerate`` reports a rank-deficient cross-covariance (the minimizer is
    still valid, but may be one member of a family).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise ValueError(f"size mismatch: {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise ValueError("need at least 3 corresponded points")
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    S = (dst - dc).T @ (src - sc)
    U, sig, Vt = np.linalg.svd(S)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    t = dc - R @ sc
    smax = sig[0] if sig[0] > 0 else 1.0
    degenerate = bool(sig[2] / smax < DEGENERACY_GAP)
    return Pose3(R, t), degenerate


def alignment_residual(T: Pose3, src: np.ndarray, dst: np.ndarray) -> float:
    """RMS point residual of a rigid alignment."""
    d = T.apply(src) - np.asarray(dst, dtype=float)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def chamfer(p1: np.ndarray, p2: np.ndarray) -> float:
    """Symmetric Chamfer distance: sum of the two mean squared nearest-neighbor
    distances. Exact O(N*M) computation."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.size == 0 or p2.size == 0:
        raise ValueError("chamfer distance of an empty point set")
    d2 = cdist(p1, p2, "sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if np.any(lo > hi):
            raise ValueError("aabb min corner exceeds max corner")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


def aabb(points: np.ndarray) -> Aabb:
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        raise ValueError("aabb of an empty point set")
    return Aabb(points.min(axis=0), points.max(axis=0))


def overlap_fraction(small: Aabb, large: Aabb) -> float:
    """Intersection volume as a fraction of the small box's volume."""
    if small.volume <= 0.0:
        raise ValueError("zero-volume small box")
    ext = np.minimum(small.hi, large.hi) - np.maximum(small.lo, large.lo)
    if np.any(ext <= 0):
        return 0.0
    return float(np.prod(ext) / small.volume)
