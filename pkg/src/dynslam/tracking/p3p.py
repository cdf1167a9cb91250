"""Minimal 3-point absolute pose, Kabsch alignment and a RANSAC wrapper."""
from __future__ import annotations

import math

import numpy as np
from numpy.polynomial import polynomial as npoly

from ..geometry import CameraModel, Pose


def kabsch(A: np.ndarray, B: np.ndarray) -> Pose:
    """Least-squares rigid transform with ``B ~ R A + t``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ca, cb = A.mean(0), B.mean(0)
    M = (B - cb).T @ (A - ca)
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return Pose(R, cb - R @ ca)


def bearings(cam: CameraModel, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    f = np.stack([(pixels[:, 0] - cam.cx) / cam.fx, (pixels[:, 1] - cam.cy) / cam.fy,
                  np.ones(len(pixels))], axis=1)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def p3p(points: np.ndarray, bearing: np.ndarray) -> list[Pose]:
    """All poses ``T`` (points -> camera) consistent with three point/bearing pairs.

    With ``s2 = u s1`` and ``s3 = v s1`` the three law-of-cosines constraints
    reduce to ``u = N(v) / D(v)`` and a quartic in ``v``.
    """
    P = np.asarray(points, dtype=float)
    f = np.asarray(bearing, dtype=float)
    a = np.linalg.norm(P[1] - P[2])
    b = np.linalg.norm(P[0] - P[2])
    c = np.linalg.norm(P[0] - P[1])
    if min(a, b, c) < 1e-9:
        return []
    ca, cb, cg = float(f[1] @ f[2]), float(f[0] @ f[2]), float(f[0] @ f[1])
    K = (a * a - c * c) / (b * b)
    N = np.array([1.0 + K, -2.0 * K * cb, K - 1.0])     # ascending powers of v
    D = np.array([2.0 * cg, -2.0 * ca])
    Q = np.array([1.0, -2.0 * cb, 1.0])
    D2 = npoly.polymul(D, D)
    lhs = c * c * npoly.polymul(Q, D2)
    rhs = b * b * npoly.polyadd(npoly.polyadd(D2, npoly.polymul(N, N)),
                                -2.0 * cg * npoly.polymul(N, D))
    poly = npoly.polysub(lhs, rhs)
    poly = np.trim_zeros(poly, "b")
    if len(poly) < 2 or not np.all(np.isfinite(poly)):
        return []
    roots = npoly.polyroots(poly)
    scale = max(1.0, np.abs(roots).max(initial=0.0))
    sols = []
    dpoly = npoly.polyder(poly)
    for r in roots:
        if abs(r.imag) > 1e-6 * scale:
            continue
        v = r.real
        for _ in range(3):  # polish the root
            dv = npoly.polyval(v, dpoly)
            if dv == 0:
                break
            v -= npoly.polyval(v, poly) / dv
        Dv = npoly.polyval(v, D)
        if abs(Dv) < 1e-12:
            continue
        u = npoly.polyval(v, N) / Dv
        q = 1.0 + v * v - 2.0 * v * cb
        if q <= 0 or u <= 0 or v <= 0:
            continue
        s1 = b / math.sqrt(q)
        s = _refine_depths(np.array([s1, u * s1, v * s1]), a, b, c, ca, cb, cg)
        cam_pts = s[:, None] * f
        sols.append(kabsch(P, cam_pts))
    return sols


def _refine_depths(s, a, b, c, ca, cb, cg, iterations=3):
    """Newton steps on the three law-of-cosines equations in the ray depths."""
    target = np.array([a * a, b * b, c * c])
    for _ in range(iterations):
        s1, s2, s3 = s
        F = np.array([s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca,
                      s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb,
                      s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg]) - target
        J = np.array([[0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
                      [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
                      [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0]])
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        s = s - step
    return s


def reprojection_residuals(cam: CameraModel, T: Pose, points: np.ndarray, observed: np.ndarray) -> np.ndarray:
    pc = T.apply(points)
    res = np.full(len(points), np.inf)
    front = pc[:, 2] > 1e-6
    if front.any():
        uv = cam.project_points(pc[front])
        res[front] = np.linalg.norm(uv - observed[front], axis=1)
    return res


def ransac_p3p(cam: CameraModel, points: np.ndarray, observed: np.ndarray, rng: np.random.Generator,
               threshold: float = 2.0, max_iterations: int = 200, confidence: float = 0.95):
    """Best P3P hypothesis by inlier count. Returns ``(T, inlier_mask)`` or ``(None, None)``."""
    points = np.asarray(points, dtype=float)
    observed = np.asarray(observed, dtype=float)
    n = len(points)
    if n < 4:
        return None, None
    f = bearings(cam, observed)
    best, best_inl, best_count = None, None, 0
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, 3, replace=False)
        for T in p3p(points[idx], f[idx]):
            inl = reprojection_residuals(cam, T, points, observed) < threshold
            c = int(inl.sum())
            if c > best_count:
                best, best_inl, best_count = T, inl, c
                w = c / n
                if w >= 1.0:
                    needed = 0
                else:
                    needed = math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w ** 3))
    if best is None:
        return None, None
    return best, best_inl
