"""SO(3)/SE(3) numerics: exponential and logarithm maps, Haar sampling, poses.

Frame convention used throughout the sampler: rotational rates are expressed
in the gripper body frame and applied on the right (R <- R exp(dt * w)),
translational rates live in the scene frame (p <- p + dt * v).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .irreps import check_rotation


def skew(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [w]_x with [w]_x v = w x v (batched)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series branch below 1e-8 (batched over leading axes)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    K = skew(w)
    K2 = K @ K
    t = theta[..., None, None]
    small = t < 1e-8
    # sin(t)/t and (1-cos t)/t^2 with their series limits at t -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t * t / 6.0, np.sin(t) / np.where(small, 1.0, t))
        b = np.where(small, 0.5 - t * t / 24.0, (1.0 - np.cos(t)) / np.where(small, 1.0, t * t))
    return np.eye(3) + a * K + b * K2


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp on angles < pi; deterministic axis at angle pi."""
    R = np.asarray(R, dtype=float)
    check_rotation(R)
    if R.ndim > 2:
        return np.stack([so3_log(r) for r in R])
    c = (np.trace(R) - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(vee)  # sin(theta), far better conditioned than arccos
    theta = np.arctan2(s, c)
    if theta < 1e-7:
        return vee  # exact to O(theta^3)
    if theta < np.pi - 1e-6:
        return theta / s * vee
    # Near pi: R + I = 2 n n^T + O(pi - theta); take the dominant diagonal.
    M = R + np.eye(3)
    k = int(np.argmax(np.diag(M)))
    n = M[:, k] / np.sqrt(2.0 * M[k, k])
    n /= np.linalg.norm(n)
    # Fix the sign from the antisymmetric part while it still carries one,
    # else make the dominant component positive.
    if np.linalg.norm(vee) > 1e-12:
        if np.dot(vee, n) < 0:
            n = -n
    elif n[k] < 0:
        n = -n
    return theta * n


def rotation_between(theta_a: np.ndarray, theta_b: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    return float(np.linalg.norm(so3_log(theta_a.T @ theta_b)))


def sample_rotation_uniform(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a normalized 4-normal quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_matrix(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix (batched)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


@dataclass
class Pose:
    """A rigid transform (R, p) in meters."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.R = np.asarray(self.R, dtype=float)
        self.p = np.asarray(self.p, dtype=float)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize(self.R), self.p.copy())


@dataclass
class Twist:
    """Velocity (w, v): body-frame rotational rate and scene-frame translation rate."""

    w: np.ndarray
    v: np.ndarray


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.R @ b.R, a.R @ b.p + a.p)


def inverse(a: Pose) -> Pose:
    Rt = a.R.T
    return Pose(Rt, -Rt @ a.p)


def apply(a: Pose, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ a.R.T + a.p
