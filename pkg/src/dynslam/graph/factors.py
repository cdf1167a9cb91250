"""Residuals and analytic Jacobians of the five factor kinds.

Variables are keyed by tuples:

* ``("X", k)``      camera pose (camera to world), 6 dof
* ``("P", pid)``    static point in the world frame, 3 dof
* ``("D", pid, k)`` dynamic point at frame ``k``, 3 dof
* ``("H", l, k)``   world-frame motion of object ``l`` from ``k-1`` to ``k``, 6 dof

Pose variables are perturbed on the left, ``X <- exp(d) X``; points
additively. Jacobians are with respect to these perturbations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, adjoint, log_se3, se3_right_jacobian_inv, skew_batch

KINDS = ("PointMeasurement", "Odometry", "PointMotion", "SmoothMotion", "PriorPose")
DIMS = {"PointMeasurement": 3, "Odometry": 6, "PointMotion": 3, "SmoothMotion": 6, "PriorPose": 6}
ARITY = {"PointMeasurement": 2, "Odometry": 2, "PointMotion": 3, "SmoothMotion": 2, "PriorPose": 1}


def is_pose_key(key) -> bool:
    return key[0] in ("X", "H")


def key_name(key) -> str:
    return key[0] + "_".join(str(x) for x in key[1:])


@dataclass
class Factor:
    """One factor. ``keys`` order:

    PointMeasurement ``(X_k, point)``, Odometry ``(X_{k-1}, X_k)``,
    PointMotion ``(m_{k-1}, m_k, H_k)``, SmoothMotion ``(H_{k-1}, H_k)``,
    PriorPose ``(X,)``. ``measurement`` is ``z`` (3-vector) for point
    measurements, a Pose for odometry and priors, None otherwise.
    """

    kind: str
    keys: tuple
    measurement: object = None
    sigma: np.ndarray | None = None      # unit noise when omitted

    def __post_init__(self):
        d = DIMS.get(self.kind)
        if d is None:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if len(self.keys) != ARITY[self.kind]:
            raise ValueError(f"{self.kind} takes {ARITY[self.kind]} variables")
        s = np.ones(d) if self.sigma is None else self.sigma
        if not (isinstance(s, np.ndarray) and s.shape == (d,) and s.dtype == float):
            s = np.broadcast_to(np.asarray(s, dtype=float), (d,)).copy()
        if not s.min() > 0:
            raise ValueError("noise sigmas must be positive")
        self.sigma = s

    @property
    def dim(self) -> int:
        return DIMS[self.kind]

    @property
    def sqrt_info(self) -> np.ndarray:
        return np.diag(1.0 / self.sigma)


# --------------------------------------------------------------------------- batched point factors

def point_measurement_batch(R, t, m, z):
    """``X^-1 m - z`` for ``n`` factors; returns ``r (n,3)``, ``J_X (n,3,6)``, ``J_m (n,3,3)``."""
    Rt = np.transpose(R, (0, 2, 1))
    d = m - t
    r = np.einsum("nij,nj->ni", Rt, d) - z
    B = np.concatenate([-np.broadcast_to(np.eye(3), (len(m), 3, 3)), skew_batch(m)], axis=2)
    return r, Rt @ B, Rt


def point_motion_batch(RH, tH, m_prev, m_curr):
    """``m_k - H m_{k-1}``; returns ``r``, ``J_prev = -R_H``, ``J_curr = I``, ``J_H = [-I, [H m]x]``."""
    Hm = np.einsum("nij,nj->ni", RH, m_prev) + tH
    r = m_curr - Hm
    n = len(r)
    JH = np.concatenate([-np.broadcast_to(np.eye(3), (n, 3, 3)), skew_batch(Hm)], axis=2)
    return r, -RH, np.broadcast_to(np.eye(3), (n, 3, 3)), JH


# --------------------------------------------------------------------------- pose factors

def odometry(X_prev: Pose, X_k: Pose, T: Pose):
    """``log(X_k^-1 X_{k-1} T)`` with Jacobians for ``(X_{k-1}, X_k)``."""
    A = X_prev @ T
    e = log_se3(X_k.inverse() @ A)
    J = se3_right_jacobian_inv(e) @ adjoint(A.inverse())
    return e, [J, -J]


def smooth_motion(H_prev: Pose, H_k: Pose):
    """``log(H_{k-1}^-1 H_k)`` with Jacobians for ``(H_{k-1}, H_k)``."""
    e = log_se3(H_prev.inverse() @ H_k)
    J = se3_right_jacobian_inv(e) @ adjoint(H_k.inverse())
    return e, [-J, J]


def prior_pose(X: Pose, P: Pose):
    """``log(P^-1 X)`` with its Jacobian."""
    e = log_se3(P.inverse() @ X)
    return e, [se3_right_jacobian_inv(e) @ adjoint(X.inverse())]


def evaluate(factor: Factor, values: dict):
    """Residual (unwhitened) and per-variable Jacobians of one factor."""
    v = [values[k] for k in factor.keys]
    kind = factor.kind
    if kind == "PointMeasurement":
        X, m = v
        r, JX, Jm = point_measurement_batch(X.R[None], X.t[None], np.asarray(m, float)[None],
                                            np.asarray(factor.measurement, float)[None])
        return r[0], [JX[0], Jm[0]]
    if kind == "PointMotion":
        mp, mk, H = v
        r, Jp, Jc, JH = point_motion_batch(H.R[None], H.t[None], np.asarray(mp, float)[None],
                                           np.asarray(mk, float)[None])
        return r[0], [Jp[0], np.array(Jc[0]), JH[0]]
    if kind == "Odometry":
        return odometry(v[0], v[1], factor.measurement)
    if kind == "SmoothMotion":
        return smooth_motion(v[0], v[1])
    return prior_pose(v[0], factor.measurement)


def residual(factor: Factor, values: dict) -> np.ndarray:
    return evaluate(factor, values)[0]
