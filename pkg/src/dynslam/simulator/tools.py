"""Helpers around simulated data: perturbation, mask deletion and ground-truth maps."""
from __future__ import annotations

import copy

import numpy as np

from ..dataio import FrameBundle
from ..geometry import Pose, exp_se3
from ..worldmap import GlobalMap, ObjectTrack
from .scene import Simulation


def perturb(values: dict, std: float, seed: int, point_std: float | None = None) -> dict:
    """Noisy copy of ``{key: Pose | 3-vector}``.

    Poses are left-multiplied by ``exp(n)`` with ``n ~ N(0, std^2 I_6)``;
    points get additive ``N(0, point_std^2)`` noise (``std`` by default).
    Keys are visited in sorted order so the draw is reproducible.
    """
    rng = np.random.default_rng(seed)
    ps = std if point_std is None else point_std
    out = {}
    for key in sorted(values, key=repr):
        v = values[key]
        if isinstance(v, Pose):
            out[key] = exp_se3(rng.normal(0.0, 1.0, 6) * std) @ v if std > 0 else v
        else:
            v = np.asarray(v, dtype=float)
            out[key] = v + rng.normal(0.0, 1.0, v.shape) * ps if ps > 0 else v.copy()
    return out


def perturb_map(gmap: GlobalMap, std: float, seed: int, point_std: float | None = None,
                keep_first: bool = True) -> GlobalMap:
    """Deep copy of a map with perturbed cameras, motions and point positions."""
    out = copy.deepcopy(gmap)
    frames = sorted(out.cameras)
    cams = perturb({k: out.cameras[k] for k in frames[1:] if keep_first} if keep_first
                   else dict(out.cameras), std, seed)
    out.cameras.update(cams)
    mot = {(l, k): H for l, o in out.objects.items() for k, H in o.motions.items()}
    for (l, k), H in perturb(mot, std, seed + 1).items():
        out.objects[l].motions[k] = H
    pts = {(pid, i): pos for pid, p in out.points.items() for i, pos in enumerate(p.positions)}
    for (pid, i), pos in perturb(pts, std, seed + 2, point_std).items():
        out.points[pid].positions[i] = pos
    return out


def delete_masks(frames, fraction: float, seed: int, gt=None, gt_id: int | None = None,
                 max_run: int | None = None, protect_first: int = 2):
    """Blank an object's instance mask in a random subset of frames.

    ``gt_id`` selects the object through ``gt.mask_to_gt``; by default every
    instance is removed. ``max_run`` caps consecutive deletions. The first
    ``protect_first`` frames are kept so the object is initialised. Returns
    the new frame list and the sorted deleted frame ids.
    """
    rng = np.random.default_rng(seed)
    frames = list(frames)
    n = len(frames)
    candidates = list(range(protect_first, n))
    target = int(round(fraction * n))
    order = rng.permutation(candidates)
    chosen = set()
    for i in order:
        if len(chosen) >= target:
            break
        if max_run is not None:
            run = 1
            j = i - 1
            while j in chosen:
                run += 1
                j -= 1
            j = i + 1
            while j in chosen:
                run += 1
                j += 1
            if run > max_run:
                continue
        chosen.add(int(i))
    out = []
    for i, fb in enumerate(frames):
        if i not in chosen:
            out.append(fb)
            continue
        mask = fb.mask.copy()
        if gt_id is None:
            mask[:] = 0
        else:
            for (k, j), g in gt.mask_to_gt.items():
                if k == fb.frame_id and g == gt_id:
                    mask[mask == j] = 0
        out.append(FrameBundle(fb.frame_id, fb.depth.copy(), mask, None if fb.flow is None else fb.flow.copy(),
                               fb.cam, fb.depth_scale))
    return out, sorted(frames[i].frame_id for i in chosen)


def ground_truth_map(sim: Simulation, n_static: int = 300, n_object: int = 100, seed: int = 0,
                     min_track: int = 2) -> GlobalMap:
    """Map with exact cameras, object motions and point tracks taken from the generating clouds.

    Points are recorded in every frame where they are in front of the camera
    and inside the image; measurements are exact camera-frame coordinates.
    Object labels equal ground-truth ids.
    """
    rng = np.random.default_rng(seed)
    cam = sim.cam
    gt = sim.gt
    frames = sorted(gt.camera_poses)
    gmap = GlobalMap()
    for k in frames:
        gmap.cameras[k] = gt.camera_poses[k]
        if k - 1 in gt.camera_poses:
            gmap.odometry[k] = gt.camera_poses[k - 1].inverse() @ gt.camera_poses[k]

    def visible(world, k):
        pc = gt.camera_poses[k].inverse().apply(world)
        ok = pc[:, 2] > 0.5
        uv = np.zeros((len(pc), 2))
        uv[ok] = cam.project_points(pc[ok])
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
        return ok, uv, pc

    def add_tracks(label, world_at, n):
        vis0, _, _ = visible(world_at(frames[0]), frames[0])
        cand = np.flatnonzero(vis0)
        pick = rng.choice(cand, size=min(n, len(cand)), replace=False) if len(cand) else cand
        pick = np.sort(pick)
        per_frame = {k: visible(world_at(k)[pick], k) + (world_at(k)[pick],) for k in frames}
        for c in range(len(pick)):
            ks = []
            for k in frames:
                if per_frame[k][0][c]:
                    ks.append(k)
                else:
                    break
            if len(ks) < min_track:
                continue
            p = gmap.new_point(label)
            for k in ks:
                ok, uv, pc, wpt = per_frame[k]
                p.add(k, uv[c], pc[c], wpt[c])

    add_tracks(0, lambda k: sim.static_cloud, n_static)
    for g, body in enumerate(sim.body_clouds, start=1):
        L = {k: gt.object_poses[(k, g)] for k in frames}
        obj = ObjectTrack(g, status="dynamic", first_frame=frames[0], last_seen_frame=frames[-1])
        gmap.objects[g] = obj
        add_tracks(g, lambda k, L=L, body=body: L[k].apply(body), n_object)
        for k in frames[1:]:
            obj.motions[k] = L[k] @ L[k - 1].inverse()
            obj.point_ids[k] = [pid for pid, p in gmap.points.items()
                                if p.label == g and k in p.frames and k - 1 in p.frames]
    return gmap
