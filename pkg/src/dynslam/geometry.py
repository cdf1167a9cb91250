"""SE(3) calculus, pinhole projection and rigid-body point motion.

Twists are 6-vectors ordered ``(rho, phi)``: translational part first, then
the rotation vector. ``exp(twist)`` maps into SE(3) with the usual closed
form; Jacobians follow the same ordering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera, NonPositiveDepth, OutOfBounds

SMALL_ANGLE = 1e-10
NEAR_PI = 1e-6
MIN_DEPTH = 1e-6


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for an ``(n, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray, check_pi: bool = True) -> np.ndarray:
    """Rotation vector of ``R``.

    The angle comes from ``atan2`` of the skew part against the trace, which
    keeps full precision for small rotations where ``arccos`` does not.
    """
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = math.sqrt(float(w @ w))
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - NEAR_PI:
        if check_pi:
            raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
        return _so3_log_near_pi(R, theta)
    if s < SMALL_ANGLE:
        return w
    return (theta / s) * w


def _so3_log_near_pi(R, theta):
    # axis from the dominant column of R + I
    B = 0.5 * (R + np.eye(3))
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / math.sqrt(max(B[i, i], 1e-300))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if axis @ w < 0:
        axis = -axis
    return theta * axis / np.linalg.norm(axis)


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    if theta < 1e-4:
        return np.eye(3) + (0.5 - theta**2 / 24.0) * K + (1.0 / 6.0 - theta**2 / 120.0) * (K @ K)
    t2 = theta * theta
    return (np.eye(3) + (1.0 - math.cos(theta)) / t2 * K
            + (theta - math.sin(theta)) / (t2 * theta) * (K @ K))


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    return np.eye(3) - 0.5 * K + _vinv_coeff(theta) * (K @ K)


def _vinv_coeff(theta: float) -> float:
    if theta < 1e-4:
        return 1.0 / 12.0 + theta * theta / 720.0
    return (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.R @ other.R, self.R @ other.t + self.t)
        return self.apply(other)

    def apply(self, points) -> np.ndarray:
        """Transform ``(3,)`` or ``(n, 3)`` points."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def orthonormalized(self) -> "Pose":
        return Pose(nearest_rotation(self.R), self.t)

    @property
    def angle(self) -> float:
        c = 0.5 * (np.trace(self.R) - 1.0)
        w = 0.5 * vee(self.R - self.R.T)
        return math.atan2(float(np.linalg.norm(w)), float(c))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def exp_se3(twist) -> Pose:
    xi = np.asarray(twist, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        R = np.eye(3) + K + 0.5 * K2
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        t2 = theta * theta
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
        c = (theta - math.sin(theta)) / (t2 * theta)
        R = np.eye(3) + a * K + b * K2
        V = np.eye(3) + b * K + c * K2
    return Pose(R, V @ rho)


def log_se3(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.R)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    Vinv = np.eye(3) - 0.5 * K + _vinv_coeff(theta) * (K @ K)
    return np.concatenate([Vinv @ pose.t, phi])


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint so that ``P exp(x) P^-1 = exp(Ad(P) x)``."""
    A = np.zeros((6, 6))
    A[:3, :3] = pose.R
    A[:3, 3:] = skew(pose.t) @ pose.R
    A[3:, 3:] = pose.R
    return A


def _q_matrix(rho, phi) -> np.ndarray:
    theta = math.sqrt(float(phi @ phi))
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PPR = P @ PR
    RPP = RP @ P
    if theta < 1e-2:
        t2 = theta * theta
        c2 = 1.0 / 6.0 - t2 / 120.0
        c3 = 1.0 / 24.0 - t2 / 720.0
        c4 = 1.0 / 120.0 - t2 / 2520.0
    else:
        t2 = theta * theta
        s, c = math.sin(theta), math.cos(theta)
        c2 = (theta - s) / (t2 * theta)
        c3 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c4 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (0.5 * Rh + c2 * (PR + RP + PRP) + c3 * (PPR + RPP - 3.0 * PRP)
            + c4 * (PRP @ P + P @ PRP))


def se3_left_jacobian(twist) -> np.ndarray:
    xi = np.asarray(twist, dtype=float)
    J = so3_left_jacobian(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _q_matrix(xi[:3], xi[3:])
    return out


def se3_left_jacobian_inv(twist) -> np.ndarray:
    xi = np.asarray(twist, dtype=float)
    Jinv = so3_left_jacobian_inv(xi[3:])
    Q = _q_matrix(xi[:3], xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(twist) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(twist, dtype=float))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def in_bounds(self, uv) -> np.ndarray:
        """Boolean mask of pixels whose nearest integer pixel lies on the grid."""
        uv = np.asarray(uv, dtype=float)
        u = np.floor(uv[..., 0] + 0.5)
        v = np.floor(uv[..., 1] + 0.5)
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def project_points(self, pc: np.ndarray) -> np.ndarray:
        """Vectorised projection of camera-frame points; no depth check."""
        pc = np.asarray(pc, dtype=float)
        z = pc[..., 2]
        return np.stack([self.fx * pc[..., 0] / z + self.cx,
                         self.fy * pc[..., 1] / z + self.cy], axis=-1)

    def backproject_points(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        d = np.asarray(depth, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx * d
        y = (uv[..., 1] - self.cy) / self.fy * d
        return np.stack([x, y, d], axis=-1)


def to_homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 4:
        return p / p[..., 3:4]
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def _euclidean(p) -> tuple[np.ndarray, bool]:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 4:
        return p[..., :3] / p[..., 3:4], True
    return p, False


def project(cam: CameraModel, p) -> np.ndarray:
    """Pixel ``(u, v)`` of a single camera-frame point (3- or 4-vector)."""
    x, _ = _euclidean(p)
    if x[2] <= MIN_DEPTH:
        raise BehindCamera(f"point depth {x[2]!r} not in front of the camera")
    return np.array([cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy])


def backproject(cam: CameraModel, px, depth: float) -> np.ndarray:
    """Homogeneous camera-frame point seen at pixel ``px`` with ``depth``."""
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth!r} must be positive")
    u, v = float(px[0]), float(px[1])
    if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {cam.width}x{cam.height}")
    return np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth, 1.0])


def projection_jacobian(cam: CameraModel, pc: np.ndarray) -> np.ndarray:
    """d(u, v)/d(x, y, z) for ``(n, 3)`` camera points, shape ``(n, 2, 3)``."""
    pc = np.atleast_2d(np.asarray(pc, dtype=float))
    iz = 1.0 / pc[:, 2]
    J = np.zeros((pc.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * pc[:, 0] * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * pc[:, 1] * iz * iz
    return J


def frame_change_motion(L_prev: Pose, H_body: Pose) -> Pose:
    """World-frame motion ``L H_body L^-1`` of a body with pose ``L_prev``."""
    return L_prev @ H_body @ L_prev.inverse()


def body_from_world_motion(L_prev: Pose, H_world: Pose) -> Pose:
    return L_prev.inverse() @ H_world @ L_prev


def apply_motion(H: Pose, m) -> np.ndarray:
    """Move homogeneous (or Euclidean) points by ``H``; w stays 1."""
    x, homo = _euclidean(m)
    y = H.apply(x)
    return to_homogeneous(y) if homo else y
