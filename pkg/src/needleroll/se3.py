"""Rigid-body geometry for needle-tip poses.

Rotation matrices are world_from_body. The instrument axis is the body +z
axis, so the heading of a pose is R @ [0, 0, 1]. The roll angle of a pose is
defined relative to the minimal rotation that takes +z to the current
heading (see decompose_roll). Positions are in millimetres, angles in
radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EZ = np.array([0.0, 0.0, 1.0])

_TWO_PI = 2.0 * math.pi


class DegenerateConfiguration(ValueError):
    """Point sets unusable for rigid registration (too few or collinear)."""


class AntiparallelHeading(ValueError):
    """Roll decomposition is singular: heading opposes the reference axis."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = (a + math.pi) % _TWO_PI - math.pi
    if w == -math.pi:
        w = math.pi
    return w


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix for a rotation vector, exact for any magnitude."""
    w = np.asarray(w, dtype=float)
    t = float(np.linalg.norm(w))
    K = skew(w)
    if t < 1e-8:
        # series for sin(t)/t and (1 - cos(t))/t^2
        a = 1.0 - t * t / 6.0
        b = 0.5 - t * t / 24.0
    else:
        a = math.sin(t) / t
        b = (1.0 - math.cos(t)) / (t * t)
    return np.eye(3) + a * K + b * (K @ K)


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def so3_log(R) -> np.ndarray:
    """Rotation vector of a rotation matrix; magnitude in [0, pi].

    Goes through the quaternion form, which stays accurate near 0 and pi.
    """
    q = quat_from_matrix(R)
    nv = float(np.linalg.norm(q[1:]))
    if nv < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(nv, q[0])
    return (angle / nv) * q[1:]


def _v_matrix(w) -> np.ndarray:
    t = float(np.linalg.norm(w))
    K = skew(w)
    if t < 1e-8:
        b = 0.5 - t * t / 24.0
        c = 1.0 / 6.0 - t * t / 120.0
    else:
        b = (1.0 - math.cos(t)) / (t * t)
        c = (t - math.sin(t)) / (t * t * t)
    return np.eye(3) + b * K + c * (K @ K)


def se3_exp(twist, dt: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a body twist (v, w) scaled by dt.

    Returns (R, p): the rotation and translation of the relative pose
    reached after moving along the constant twist for dt. A zero twist gives
    the identity.
    """
    xi = np.asarray(twist, dtype=float) * dt
    v, w = xi[:3], xi[3:]
    R = so3_exp(w)
    p = _v_matrix(w) @ v
    return R, p


def se3_log(R, p) -> np.ndarray:
    """Inverse of se3_exp (dt = 1): the twist (v, w) with ||w|| <= pi."""
    w = so3_log(R)
    t = float(np.linalg.norm(w))
    K = skew(w)
    if t < 1e-8:
        Vinv = np.eye(3) - 0.5 * K + (1.0 / 12.0) * (K @ K)
    else:
        a = math.sin(t) / t
        b = (1.0 - math.cos(t)) / (t * t)
        coef = (1.0 - a / (2.0 * b)) / (t * t)
        Vinv = np.eye(3) - 0.5 * K + coef * (K @ K)
    v = Vinv @ np.asarray(p, dtype=float)
    return np.concatenate([v, w])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid tip pose: position p (mm) and world_from_body rotation R."""

    p: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.eye(3))

    @property
    def heading(self) -> np.ndarray:
        return self.R @ EZ

    @property
    def roll(self) -> float:
        return decompose_roll(self.R)[1]

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.p + self.R @ other.p, self.R @ other.R)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(-(Rt @ self.p), Rt)

    def transform(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.p


def angular_error(R_est, R_true) -> float:
    """Geodesic angle between two rotations, in [0, pi].

    Computed on the relative rotation R_est^T R_true; the trace argument is
    clamped to [-1, 1] so roundoff near 0 and pi cannot produce NaN.
    """
    D = np.asarray(R_est, dtype=float).T @ np.asarray(R_true, dtype=float)
    c = (np.trace(D) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def align_from_z(eta) -> np.ndarray:
    """Minimal rotation taking the +z axis onto the unit vector eta.

    Raises AntiparallelHeading when eta is (numerically) opposite to +z; the
    workspace never approaches that configuration, so it is an error rather
    than a branch.
    """
    eta = np.asarray(eta, dtype=float)
    c = float(eta[2])
    if c < -1.0 + 1e-9:
        raise AntiparallelHeading("heading antiparallel to the reference axis")
    a = np.array([-eta[1], eta[0], 0.0])  # z cross eta
    K = skew(a)
    return np.eye(3) + K + (K @ K) / (1.0 + c)


def heading_tangent_basis(eta) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal pair spanning the plane perpendicular to eta.

    Used wherever a 2-D coordinate chart on the unit sphere is needed at a
    known heading (heading noise injection, heading residuals).
    """
    eta = np.asarray(eta, dtype=float)
    ref = np.array([1.0, 0.0, 0.0]) if abs(eta[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(eta, ref)
    b1 = b1 / np.linalg.norm(b1)
    b2 = np.cross(eta, b1)
    b2 = b2 / np.linalg.norm(b2)
    return b1, b2


def decompose_roll(R) -> tuple[np.ndarray, float]:
    """Split a rotation into (heading, roll).

    heading = R @ ez; roll is the residual rotation about the body z axis
    measured against the minimal-rotation frame at that heading. roll is in
    (-pi, pi].
    """
    R = np.asarray(R, dtype=float)
    eta = R @ EZ
    A = align_from_z(eta)
    M = A.T @ R
    theta = math.atan2(M[1, 0], M[0, 0])
    if theta == -math.pi:
        theta = math.pi
    return eta, theta


def recompose_roll(eta, roll: float) -> np.ndarray:
    """Rotation with the given heading and roll; inverse of decompose_roll."""
    eta = np.asarray(eta, dtype=float)
    n = float(np.linalg.norm(eta))
    if n < 1e-12:
        raise ValueError("heading must be a nonzero vector")
    return align_from_z(eta / n) @ rot_z(roll)


def register_points(A, B) -> tuple[Pose, float]:
    """Least-squares rigid transform T with T(A) ~= B, plus the FRE.

    A and B are (N, 3) corresponding point sets, N >= 3 and not collinear.
    Returns (pose, fre) where fre is the root-mean-square residual
    ||T(a_i) - b_i|| over the correspondences.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise DegenerateConfiguration("point sets must both be (N, 3)")
    n = A.shape[0]
    if n < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    ca = A.mean(axis=0)
    cb = B.mean(axis=0)
    Ac = A - ca
    Bc = B - cb
    sA = np.linalg.svd(Ac, compute_uv=False)
    if sA[1] < 1e-8 * max(sA[0], 1e-12):
        raise DegenerateConfiguration("points are collinear")
    H = Ac.T @ Bc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cb - R @ ca
    res = A @ R.T + t - B
    fre = math.sqrt(float(np.mean(np.sum(res * res, axis=1))))
    return Pose(t, R), fre
