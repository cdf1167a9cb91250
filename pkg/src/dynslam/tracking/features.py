"""Static keypoint detection, flow correspondences and object point sampling."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..geometry import CameraModel


def shi_tomasi_response(image: np.ndarray, window: int = 3) -> np.ndarray:
    """Minimum eigenvalue of the local structure tensor."""
    img = np.asarray(image, dtype=float)
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(ix * ix, window, mode="nearest")
    syy = ndimage.uniform_filter(iy * iy, window, mode="nearest")
    sxy = ndimage.uniform_filter(ix * iy, window, mode="nearest")
    tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))
    return tr - disc


def _greedy_suppress(pixels: np.ndarray, shape, radius: int, occupied=None) -> np.ndarray:
    """Keep pixels in the given order unless one already kept lies within ``radius`` (Chebyshev)."""
    h, w = shape
    taken = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    if occupied is not None and len(occupied):
        for u, v in np.asarray(occupied, dtype=np.int64):
            if 0 <= u < w and 0 <= v < h:
                taken[v:v + 2 * radius + 1, u:u + 2 * radius + 1] = True
    keep = np.zeros(len(pixels), dtype=bool)
    for i, (u, v) in enumerate(pixels):
        if not taken[v + radius, u + radius]:
            keep[i] = True
            taken[v:v + 2 * radius + 1, u:u + 2 * radius + 1] = True
    return keep


def detect_features(depth: np.ndarray, mask: np.ndarray, existing=None, inlier_count: int = 0,
                    budget: int = 1200, min_distance: int = 3, quality: float = 0.01,
                    image: np.ndarray | None = None) -> np.ndarray:
    """New static keypoints ``(n, 2)`` as integer ``(u, v)``.

    Corners are scored on ``image`` (the depth raster when none is given) and
    kept only on static, valid-depth pixels away from ``existing`` points.
    Nothing is detected while ``inlier_count >= budget``.
    """
    need = budget - int(inlier_count)
    if need <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    depth = np.asarray(depth)
    resp = shi_tomasi_response(depth if image is None else image)
    allowed = (np.asarray(mask) == 0) & (depth > 0)
    if not allowed.any():
        return np.zeros((0, 2), dtype=np.int64)
    rmax = resp[allowed].max()
    cand = allowed & (resp > max(quality * rmax, 1e-12))
    vs, us = np.nonzero(cand)
    r = resp[vs, us]
    order = np.lexsort((vs * depth.shape[1] + us, -r))
    pix = np.stack([us[order], vs[order]], axis=1).astype(np.int64)
    keep = _greedy_suppress(pix, depth.shape, min_distance, existing)
    return pix[keep][:need]


def rounded(pixels) -> np.ndarray:
    return np.floor(np.asarray(pixels, dtype=float) + 0.5).astype(np.int64)


def track_correspondence(prev_pixel, flow: np.ndarray, depth: np.ndarray | None = None):
    """``p + flow(p)`` for one integer pixel, or None if it leaves the image or hits invalid depth."""
    h, w = flow.shape[:2]
    u, v = int(prev_pixel[0]), int(prev_pixel[1])
    if not (0 <= u < w and 0 <= v < h):
        return None
    p = np.array([u, v], dtype=float) + flow[v, u]
    q = rounded(p)
    if not (0 <= q[0] < w and 0 <= q[1] < h):
        return None
    if depth is not None and not depth[q[1], q[0]] > 0:
        return None
    return p


def track_correspondences(pixels: np.ndarray, flow: np.ndarray):
    """Vectorised ``p + flow(p)``; returns predictions and an in-bounds flag."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    h, w = flow.shape[:2]
    phi = flow[pixels[:, 1], pixels[:, 0]].astype(float)
    pred = pixels + phi
    q = rounded(pred)
    ok = (q[:, 0] >= 0) & (q[:, 0] < w) & (q[:, 1] >= 0) & (q[:, 1] < h)
    return pred, phi, ok


_OFFSETS = np.array([(du, dv) for dv in (-1, 0, 1) for du in (-1, 0, 1)], dtype=np.int64)


def reanchor(pred: np.ndarray, depth: np.ndarray, allowed: np.ndarray | None = None,
             expected_depth: np.ndarray | None = None, depth_tol: float = 0.05, depth_abs: float = 0.3):
    """Snap sub-pixel predictions to the nearest valid integer pixel in a 3x3 neighbourhood.

    ``allowed`` is a boolean raster of acceptable pixels (e.g. one instance
    mask). When ``expected_depth`` is given, candidates must agree with it to
    within ``max(depth_abs, depth_tol * expected)``. Returns integer pixels
    and a success flag.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    n = pred.shape[0]
    h, w = depth.shape
    cand = rounded(pred)[:, None, :] + _OFFSETS[None, :, :]          # (n, 9, 2)
    inb = (cand[..., 0] >= 0) & (cand[..., 0] < w) & (cand[..., 1] >= 0) & (cand[..., 1] < h)
    cu = np.clip(cand[..., 0], 0, w - 1)
    cv = np.clip(cand[..., 1], 0, h - 1)
    d = depth[cv, cu]
    ok = inb & (d > 0)
    if allowed is not None:
        ok &= allowed[cv, cu]
    if expected_depth is not None:
        e = np.asarray(expected_depth, dtype=float).reshape(-1, 1)
        ok &= np.abs(d - e) < np.maximum(depth_abs, depth_tol * np.abs(e))
    dist = ((cand - pred[:, None, :]) ** 2).sum(-1)
    dist = np.where(ok, dist, np.inf)
    best = np.argmin(dist, axis=1)        # first minimum keeps the offset order deterministic
    found = np.isfinite(dist[np.arange(n), best])
    return cand[np.arange(n), best], found


def sample_object_points(mask: np.ndarray, depth: np.ndarray | None = None, stride: int = 3,
                         max_depth: float = np.inf, occupied=None) -> np.ndarray:
    """Grid pixels (every ``stride``-th row and column) inside ``mask`` with valid depth."""
    sel = np.asarray(mask, dtype=bool).copy()
    grid = np.zeros_like(sel)
    grid[::stride, ::stride] = True
    sel &= grid
    if depth is not None:
        sel &= (depth > 0) & (depth <= max_depth)
    if occupied is not None and len(occupied):
        occ = np.asarray(occupied, dtype=np.int64).reshape(-1, 2)
        inside = (occ[:, 0] >= 0) & (occ[:, 0] < sel.shape[1]) & (occ[:, 1] >= 0) & (occ[:, 1] < sel.shape[0])
        occ = occ[inside]
        sel[occ[:, 1], occ[:, 0]] = False
    vs, us = np.nonzero(sel)
    return np.stack([us, vs], axis=1).astype(np.int64)


def measurements(cam: CameraModel, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Camera-frame 3D points behind integer pixels."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    d = depth[pixels[:, 1], pixels[:, 0]]
    return cam.backproject_points(pixels.astype(float), d)
