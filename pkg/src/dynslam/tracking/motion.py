"""Camera pose and object motion from 3D-2D correspondences with joint flow refinement.

Both estimators solve the same problem: find ``T`` mapping known 3D points
``m`` (world frame, previous time step) into the current camera so that
their projections agree with ``p + phi``, where ``phi`` is the per-point
optical flow. For the camera ``T = X_k^-1``; for an object ``T = G = X_k^-1 H``
and the world-frame motion follows as ``H = X_k G``.

In joint mode each ``phi_i`` is a free variable tied to the measured flow by
a weaker prior; otherwise the flow is held fixed (motion-only).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..config import NoiseConfig
from ..errors import DegenerateGeometry, TooFewPoints
from ..geometry import CameraModel, Pose, exp_se3
from .p3p import ransac_p3p, reprojection_residuals


@dataclass
class FitResult:
    T: Pose
    flow: np.ndarray           # refined (joint) or input (motion-only) flow
    inliers: np.ndarray        # bool, final reprojection residual below threshold
    residuals: np.ndarray      # pixels
    cost: float
    initial_cost: float
    iterations: int
    covariance: np.ndarray | None = None   # 6x6 a-posteriori covariance of T (left perturbation)


def _params(cam: CameraModel, noise: NoiseConfig, joint: bool):
    return (cam.fx, cam.fy, cam.cx, cam.cy, noise.sigma_p, noise.sigma_phi, noise.huber_delta_2d,
            1.0 if joint else 0.0)


def fit_transform(cam: CameraModel, points, base, flow_hat, T0: Pose, noise: NoiseConfig,
                  joint: bool = True, max_iterations: int | None = None) -> FitResult:
    """Huber-robust Levenberg-Marquardt over ``T`` (left updates) and, if joint, the flows."""
    m = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
    base = np.ascontiguousarray(base, dtype=float).reshape(-1, 2)
    phi_hat = np.ascontiguousarray(flow_hat, dtype=float).reshape(-1, 2)
    if len(m) < 3:
        raise TooFewPoints(f"{len(m)} correspondences, need at least 3")
    params = _params(cam, noise, joint)
    iters = noise.tracking_max_iterations if max_iterations is None else max_iterations
    T = T0
    phi = phi_hat.copy()
    cost, _ = kernels.robust_cost(T.R, T.t, m, base, phi, phi_hat, params)
    if not np.isfinite(cost):
        raise DegenerateGeometry("initial estimate puts points behind the camera")
    initial = cost
    lam = 1e-4
    it = 0
    checked = False
    while it < iters and cost > 1e-26:
        it += 1
        S, rhs, _, Bt, g, h = kernels.schur_system(T.R, T.t, m, base, phi, phi_hat, params, lam)
        if not checked:
            ev = np.linalg.eigvalsh(S)
            if not ev[0] > 1e-12 * max(ev[-1], 1e-300):
                raise DegenerateGeometry("rank-deficient normal equations")
            checked = True
        try:
            delta = np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            raise DegenerateGeometry("singular reduced system") from None
        dphi = -(g + np.einsum("nki,i->nk", Bt, delta)) / h[:, None] if joint else 0.0
        T_new = exp_se3(delta) @ T
        phi_new = phi + dphi
        new_cost, _ = kernels.robust_cost(T_new.R, T_new.t, m, base, phi_new, phi_hat, params)
        if new_cost < cost:
            small = cost - new_cost <= 1e-15 * cost or np.abs(delta).max() < 1e-15
            T, phi, cost = T_new, phi_new, new_cost
            lam = max(lam * 0.1, 1e-12)
            if small:
                break
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    _, res = kernels.robust_cost(T.R, T.t, m, base, phi, phi_hat, params)
    inl = res < noise.inlier_threshold_px
    return FitResult(T.orthonormalized(), phi, inl, res, cost, initial, it,
                     _covariance(T, m, base, phi, phi_hat, params, res, inl, noise, joint))


def _covariance(T, m, base, phi, phi_hat, params, res, inl, noise, joint):
    """``s^2 S^-1`` with ``S`` the reduced information at the solution and ``s^2`` the
    residual variance factor of the inliers (both in whitened units, 2n - 6 dof)."""
    n = int(inl.sum())
    if n < 4:
        return None
    S = kernels.schur_system(T.R, T.t, m, base, phi, phi_hat, params, 0.0)[0]
    r2 = (res[inl] / noise.sigma_p) ** 2
    if joint:
        r2 = r2 + ((phi_hat[inl] - phi[inl]) ** 2).sum(1) / noise.sigma_phi ** 2
    try:
        return float(r2.sum()) / (2 * n - 6) * np.linalg.inv(S)
    except np.linalg.LinAlgError:
        return None


def estimate_camera_pose_joint(cam, points_world, pixels_prev, flow_hat, init: Pose, noise: NoiseConfig,
                               joint: bool = True):
    """Returns ``(X_k camera-to-world, refined flows, inlier mask)``."""
    fit = fit_transform(cam, points_world, pixels_prev, flow_hat, init.inverse(), noise, joint)
    return fit.T.inverse(), fit.flow, fit.inliers


def estimate_object_motion_joint(cam, points_world_prev, pixels_prev, flow_hat, X_k: Pose, init: Pose,
                                 noise: NoiseConfig, joint: bool = True, return_fit: bool = False):
    """Returns ``(world-frame motion H, refined flows, inlier mask)``, plus the raw fit of
    ``G = X_k^-1 H`` with ``return_fit``."""
    G0 = X_k.inverse() @ init
    fit = fit_transform(cam, points_world_prev, pixels_prev, flow_hat, G0, noise, joint)
    if fit.inliers.sum() < 3:
        raise TooFewPoints("fewer than 3 inliers after refinement")
    out = (X_k @ fit.T).orthonormalized(), fit.flow, fit.inliers
    return out + (fit,) if return_fit else out


def initialize_motion(cam, points, observed, propagated: Pose | None, noise: NoiseConfig,
                      rng: np.random.Generator, fallback: Pose | None = None):
    """Pick the better of the propagated transform and a P3P-RANSAC hypothesis.

    Both are transforms taking ``points`` into the current camera. The one
    with more reprojection inliers wins; the propagated model wins ties.
    Returns ``(T, model_name)`` with model ``"propagated"``, ``"p3p"`` or
    ``"fallback"``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    observed = np.asarray(observed, dtype=float).reshape(-1, 2)
    thr = noise.inlier_threshold_px
    n_prop = -1
    if propagated is not None and len(points):
        n_prop = int((reprojection_residuals(cam, propagated, points, observed) < thr).sum())
    T_p3p, inl = ransac_p3p(cam, points, observed, rng, thr, noise.ransac_iterations,
                            noise.ransac_confidence)
    n_p3p = -1 if T_p3p is None else int(inl.sum())
    if max(n_prop, n_p3p) <= 0:
        if propagated is not None and n_prop == 0 and T_p3p is None:
            return propagated, "propagated"
        return (fallback if fallback is not None else Pose.identity()), "fallback"
    if n_prop >= n_p3p:
        return propagated, "propagated"
    return T_p3p, "p3p"
