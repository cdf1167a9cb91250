"""Scene-flow classification, label propagation and mask propagation."""
from __future__ import annotations

from collections import Counter

import numpy as np

from ..geometry import CameraModel, Pose
from .features import rounded, track_correspondences


def scene_flow(points_prev_world: np.ndarray, points_curr_world: np.ndarray) -> np.ndarray:
    """``m_{k-1} - m_k`` per point; zero for static structure under the true camera pose."""
    return np.asarray(points_prev_world, dtype=float) - np.asarray(points_curr_world, dtype=float)


def current_points(cam: CameraModel, pred: np.ndarray, depth: np.ndarray, X_k: Pose):
    """World points seen at sub-pixel ``pred`` using the depth of the nearest pixel."""
    q = rounded(pred)
    h, w = depth.shape
    ok = (q[:, 0] >= 0) & (q[:, 0] < w) & (q[:, 1] >= 0) & (q[:, 1] < h)
    d = np.zeros(len(q))
    d[ok] = depth[q[ok, 1], q[ok, 0]]
    ok &= d > 0
    pts = X_k.apply(cam.backproject_points(pred, d))
    return pts, ok


def is_dynamic(flows: np.ndarray, threshold: float = 0.12, ratio: float = 0.30) -> bool:
    """Dynamic when strictly more than ``ratio`` of points move by strictly more than ``threshold``."""
    flows = np.asarray(flows, dtype=float).reshape(-1, 3)
    if len(flows) == 0:
        return False
    moving = np.linalg.norm(flows, axis=1) > threshold
    return bool(moving.mean() > ratio)


def classify_objects(flows_by_mask: dict, threshold: float = 0.12, ratio: float = 0.30) -> dict:
    """``{mask_id: "dynamic" | "static"}`` from per-mask scene-flow vectors."""
    return {j: ("dynamic" if is_dynamic(f, threshold, ratio) else "static")
            for j, f in flows_by_mask.items()}


def majority_label(labels) -> int:
    """Most frequent label; ties go to the smallest nonzero label. Returns 0 for no votes."""
    counts = Counter(int(x) for x in labels)
    if not counts:
        return 0
    top = max(counts.values())
    winners = sorted(l for l, c in counts.items() if c == top)
    nonzero = [l for l in winners if l != 0]
    return nonzero[0] if nonzero else 0


def propagate_labels(votes: dict, next_label: int):
    """Assign a tracking label to every current mask.

    ``votes`` maps mask id to the previous-frame labels of the points that
    landed in it. The majority label is kept; a majority of 0 (or no votes)
    opens a new label. When two masks claim the same label the one with more
    supporting votes keeps it. Returns ``({mask_id: label}, next_label,
    set_of_new_labels)``.
    """
    claim = {}
    for j in sorted(votes):
        lab = majority_label(votes[j])
        claim[j] = (lab, sum(1 for v in votes[j] if int(v) == lab) if lab else 0)
    owner = {}
    for j in sorted(claim):
        lab, n = claim[j]
        if lab == 0:
            continue
        cur = owner.get(lab)
        if cur is None or n > claim[cur][1]:
            owner[lab] = j
    out, new = {}, set()
    for j in sorted(claim):
        lab = claim[j][0]
        if lab != 0 and owner.get(lab) == j:
            out[j] = lab
        else:
            out[j] = next_label
            new.add(next_label)
            next_label += 1
    return out, next_label, new


def propagate_mask(pixels_prev: np.ndarray, flow: np.ndarray):
    """Advect an object's previous inlier pixels by flow to stand in for a missing mask.

    Returns the predicted sub-pixel positions, the flows used and an in-bounds flag.
    """
    return track_correspondences(pixels_prev, flow)
