"""Hot inner loops with a compiled core and a numpy fallback.

Two kernels live here:

* ``schur_system`` / ``robust_cost``: the reduced normal equations of the
  joint pose-and-flow estimator. Each point carries its own 2-vector flow,
  whose 2x2 block is a scaled identity, so the flows are eliminated in
  closed form and only a 6x6 system remains.
* ``zbuffer``: nearest-point selection per pixel for splat rendering.

The compiled module ``dynslam._kernels`` is used when importable unless the
environment variable ``DYNSLAM_PURE=1`` is set. ``BACKEND`` names the choice.
"""
from __future__ import annotations

import os

import numpy as np


def _pc_and_jac(R, t, m, fx, fy, cx, cy):
    pc = m @ R.T + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    u = fx * x * iz + cx
    v = fy * y * iz + cy
    n = m.shape[0]
    # d(u,v)/d(delta) for pc' = exp(delta) pc, i.e. Jpi @ [I, -[pc]x]
    J = np.zeros((n, 2, 6))
    J[:, 0, 0] = fx * iz
    J[:, 0, 2] = -fx * x * iz * iz
    J[:, 1, 1] = fy * iz
    J[:, 1, 2] = -fy * y * iz * iz
    J[:, 0, 3] = -fx * x * y * iz * iz
    J[:, 0, 4] = fx * (1.0 + x * x * iz * iz)
    J[:, 0, 5] = -fx * y * iz
    J[:, 1, 3] = -fy * (1.0 + y * y * iz * iz)
    J[:, 1, 4] = fy * x * y * iz * iz
    J[:, 1, 5] = fy * x * iz
    return np.stack([u, v], axis=1), z, J


def _huber(s, delta):
    w = np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))
    rho = np.where(s <= delta, 0.5 * s * s, delta * (s - 0.5 * delta))
    return w, rho


def robust_cost_py(R, t, m, base, phi, phi_hat, params):
    """Robust cost and per-point reprojection residual norms (pixels)."""
    fx, fy, cx, cy, sp, sf, delta, joint = params
    uv, z, _ = _pc_and_jac(R, t, m, fx, fy, cx, cy)
    rp = (base + phi - uv) / sp
    sp_n = np.sqrt((rp * rp).sum(1))
    _, rho = _huber(sp_n, delta)
    cost = rho.sum()
    if joint:
        rf = (phi_hat - phi) / sf
        _, rho_f = _huber(np.sqrt((rf * rf).sum(1)), delta)
        cost += rho_f.sum()
    if np.any(z <= 1e-6):
        cost = np.inf
    return float(cost), sp_n * sp


def schur_system_py(R, t, m, base, phi, phi_hat, params, lam):
    """Damped reduced system ``S delta = rhs`` and back-substitution terms.

    Residuals in whitened units: ``r_p = (base + phi - pi(T m)) / sp`` and,
    if ``joint``, ``r_f = (phi_hat - phi) / sf``. Returns ``S, rhs, cost, Bt,
    g, h`` with the per-point flow step ``-(g_i + Bt_i @ delta) / h_i``.
    """
    fx, fy, cx, cy, sp, sf, delta, joint = params
    uv, z, Jpi = _pc_and_jac(R, t, m, fx, fy, cx, cy)
    rp = (base + phi - uv) / sp
    Jd = -Jpi / sp                                   # d r_p / d delta
    wp, rho = _huber(np.sqrt((rp * rp).sum(1)), delta)
    cost = rho.sum()
    A = np.einsum("n,nki,nkj->ij", wp, Jd, Jd)
    gd = np.einsum("n,nki,nk->i", wp, Jd, rp)
    A_d = A + lam * np.diag(np.diag(A))
    if not joint:
        n = m.shape[0]
        return A_d, -gd, float(cost), np.zeros((n, 2, 6)), np.zeros((n, 2)), np.ones(n)
    rf = (phi_hat - phi) / sf
    wf, rho_f = _huber(np.sqrt((rf * rf).sum(1)), delta)
    cost += rho_f.sum()
    h = (wp / sp ** 2 + wf / sf ** 2) * (1.0 + lam)
    g = (wp / sp)[:, None] * rp - (wf / sf)[:, None] * rf
    Bt = (wp / sp)[:, None, None] * Jd                # (n, 2, 6) = B_i^T
    S = A_d - np.einsum("n,nki,nkj->ij", 1.0 / h, Bt, Bt)
    rhs = -gd + np.einsum("n,nki,nk->i", 1.0 / h, Bt, g)
    return S, rhs, float(cost), Bt, g, h


def zbuffer_py(u, v, depth, width, height):
    """Index of the nearest point per pixel, -1 where empty.

    ``u, v`` are integer pixel coordinates; points off the grid or with
    non-positive depth are skipped. Ties go to the lower point index.
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height) & (depth > 0)
    idx = np.flatnonzero(ok)
    lin = v[idx] * width + u[idx]
    order = np.lexsort((idx, depth[idx], lin))
    lin_s = lin[order]
    first = np.ones(lin_s.shape[0], dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    out = np.full(width * height, -1, dtype=np.int64)
    out[lin_s[first]] = idx[order][first]
    return out.reshape(height, width)


BACKEND = "python"
schur_system = schur_system_py
robust_cost = robust_cost_py
zbuffer = zbuffer_py

if os.environ.get("DYNSLAM_PURE", "") != "1":
    try:
        from . import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None
    if _ext is not None:
        BACKEND = "cython"

        def schur_system(R, t, m, base, phi, phi_hat, params, lam):
            return _ext.schur_system(*_contig(R, t, m, base, phi, phi_hat), _params(params), float(lam))

        def robust_cost(R, t, m, base, phi, phi_hat, params):
            return _ext.robust_cost(*_contig(R, t, m, base, phi, phi_hat), _params(params))

        def zbuffer(u, v, depth, width, height):
            return _ext.zbuffer(np.ascontiguousarray(u, dtype=np.int64),
                                np.ascontiguousarray(v, dtype=np.int64),
                                np.ascontiguousarray(depth, dtype=np.float64), int(width), int(height))


def _contig(*arrs):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrs)


def _params(params):
    return np.asarray([float(x) for x in params], dtype=np.float64)
