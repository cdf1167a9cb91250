"""Factor graphs built from a :class:`GlobalMap`: the global batch graph and local windows."""
from __future__ import annotations

import io

import numpy as np

from ..config import GraphConfig
from ..errors import EmptyMap
from ..geometry import Pose
from ..worldmap import GlobalMap
from .factors import Factor, is_pose_key, key_name

MIN_MOTION_SUPPORT = 3


class FactorGraph:
    """Variables keyed by tuple, a factor list and a set of variables held constant."""

    def __init__(self):
        self.values: dict = {}
        self.factors: list[Factor] = []
        self.fixed: set = set()

    def add_variable(self, key, value, fixed=False):
        if key in self.values:
            raise ValueError(f"duplicate variable {key_name(key)}")
        if is_pose_key(key):
            if not isinstance(value, Pose):
                raise TypeError(f"{key_name(key)} needs a Pose")
        else:
            value = np.array(value, dtype=float).reshape(3)
        self.values[key] = value
        if fixed:
            self.fixed.add(key)

    def add_factor(self, factor: Factor):
        for key in factor.keys:
            if key not in self.values:
                raise KeyError(f"{factor.kind}: missing variable {key_name(key)}")
        self.factors.append(factor)

    def count(self, kind: str) -> int:
        return sum(1 for f in self.factors if f.kind == kind)

    def variable_count(self, prefix: str) -> int:
        return sum(1 for k in self.values if k[0] == prefix)

    def census(self) -> dict:
        out = {p: self.variable_count(p) for p in ("X", "P", "D", "H")}
        for f in self.factors:
            out[f.kind] = out.get(f.kind, 0) + 1
        return out

    def dump(self, stream=None) -> str:
        """One factor per line: kind, variable ids, measurement, row-major sqrt-information."""
        buf = io.StringIO() if stream is None else stream
        for f in self.factors:
            if isinstance(f.measurement, Pose):
                meas = np.concatenate([f.measurement.R.ravel(), f.measurement.t])
            elif f.measurement is None:
                meas = np.zeros(0)
            else:
                meas = np.asarray(f.measurement, dtype=float)
            parts = [f.kind, ",".join(key_name(k) for k in f.keys), "m=" + " ".join(repr(float(x)) for x in meas),
                     "w=" + " ".join(repr(float(x)) for x in f.sqrt_info.ravel())]
            buf.write(" | ".join(parts) + "\n")
        return buf.getvalue() if stream is None else ""


def point_sigma(cfg: GraphConfig, z) -> np.ndarray:
    """Isotropic measurement sigma, growing linearly with depth beyond the reference depth."""
    d = float(np.asarray(z)[2])
    return np.full(3, cfg.sigma_point * max(1.0, d / cfg.point_depth_scale_from))


def _spread(points, k) -> float:
    """Second principal RMS spread of the support at ``k-1``; near-collinear support leaves
    rotation about the line unobservable."""
    P = np.array([p.position_at(k - 1) for p in points])
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return float(s[1]) / np.sqrt(len(P))


def _admitted(p, min_len):
    return p.track_len > min_len


def build_global_graph(gmap: GlobalMap, cfg: GraphConfig | None = None, min_track_len: int = 3,
                       smooth_motion: bool = True) -> FactorGraph:
    """Full batch graph over every frame of a finished map.

    Static points (label 0) are one variable observed from many cameras;
    object points get one variable per frame, chained by point-motion
    factors through the object's motion at that frame. A motion variable is
    created only where at least three point-motion factors support it and
    the supporting points are not collinear.
    """
    cfg = cfg or GraphConfig()
    frames = gmap.frames
    if not frames:
        raise EmptyMap("map has no camera poses")
    admitted = [p for p in gmap.points.values() if _admitted(p, min_track_len)]
    if not admitted:
        raise EmptyMap(f"no point tracked for more than {min_track_len} frames")
    g = FactorGraph()
    for k in frames:
        g.add_variable(("X", k), gmap.cameras[k])
    k0 = frames[0]
    g.add_factor(Factor("PriorPose", (("X", k0),), gmap.cameras[k0], np.full(6, cfg.sigma_prior)))
    for a, b in zip(frames[:-1], frames[1:]):
        T = gmap.odometry.get(b, gmap.cameras[a].inverse() @ gmap.cameras[b])
        g.add_factor(Factor("Odometry", (("X", a), ("X", b)), T, cfg.sigma_odometry))

    # motions with enough point support
    id_sets = {(l, k): set(ids) for l, o in gmap.objects.items() for k, ids in o.point_ids.items()}
    support = {}
    for p in admitted:
        if p.label == 0 or p.label not in gmap.objects:
            continue
        obj = gmap.objects[p.label]
        fs = set(p.frames)
        for k in p.frames:
            if k - 1 in fs and k in obj.motions and p.point_id in id_sets.get((p.label, k), ()):
                support.setdefault((p.label, k), []).append(p)
    motions = {key for key, pts in support.items()
               if len(pts) >= MIN_MOTION_SUPPORT and _spread(pts, key[1]) >= cfg.sigma_point}
    for l, k in sorted(motions):
        g.add_variable(("H", l, k), gmap.objects[l].motions[k])

    for p in sorted(admitted, key=lambda q: q.point_id):
        if p.label == 0:
            key = ("P", p.point_id)
            g.add_variable(key, np.mean(p.positions, axis=0))
            for k, z in zip(p.frames, p.measurements):
                g.add_factor(Factor("PointMeasurement", (("X", k), key), z, point_sigma(cfg, z)))
            continue
        if p.label not in gmap.objects or not any((p.label, k) in motions for k in p.frames):
            continue
        for k, z, pos in zip(p.frames, p.measurements, p.positions):
            key = ("D", p.point_id, k)
            g.add_variable(key, pos)
            g.add_factor(Factor("PointMeasurement", (("X", k), key), z, point_sigma(cfg, z)))
    for (l, k) in sorted(motions):
        for p in support[(l, k)]:
            g.add_factor(Factor("PointMotion", (("D", p.point_id, k - 1), ("D", p.point_id, k), ("H", l, k)),
                                None, np.full(3, cfg.sigma_motion)))
        if smooth_motion and (l, k - 1) in motions:
            g.add_factor(Factor("SmoothMotion", (("H", l, k - 1), ("H", l, k)), None, cfg.sigma_smooth))
    return g


def build_local_graph(gmap: GlobalMap, k: int, window: int, cfg: GraphConfig | None = None) -> FactorGraph | None:
    """Sliding window over the last ``min(#frames up to k, window)`` cameras and the static
    points seen at least twice inside it. The oldest window camera is fixed; None when the
    window holds a single frame."""
    cfg = cfg or GraphConfig()
    frames = [f for f in gmap.frames if f <= k][-window:]
    if len(frames) < 2:
        return None
    inside = set(frames)
    g = FactorGraph()
    for i, f in enumerate(frames):
        g.add_variable(("X", f), gmap.cameras[f], fixed=(i == 0))
    for a, b in zip(frames[:-1], frames[1:]):
        T = gmap.odometry.get(b, gmap.cameras[a].inverse() @ gmap.cameras[b])
        g.add_factor(Factor("Odometry", (("X", a), ("X", b)), T, cfg.sigma_odometry))
    first = frames[0]
    for p in gmap.points.values():
        if p.label != 0 or p.frames[-1] < first:
            continue
        obs = [i for i, f in enumerate(p.frames) if f in inside]
        if len(obs) < 2:
            continue
        key = ("P", p.point_id)
        g.add_variable(key, np.mean([p.positions[i] for i in obs], axis=0))
        for i in obs:
            z = p.measurements[i]
            g.add_factor(Factor("PointMeasurement", (("X", p.frames[i]), key), z, point_sigma(cfg, z)))
    return g


def write_back(gmap: GlobalMap, values: dict, frames=None):
    """Copy optimised values into the map. Static point positions are overwritten on every
    record (restricted to ``frames`` when given)."""
    for key, v in values.items():
        tag = key[0]
        if tag == "X":
            gmap.cameras[key[1]] = v
        elif tag == "H":
            gmap.objects[key[1]].motions[key[2]] = v
        elif tag == "P":
            p = gmap.points[key[1]]
            for i, f in enumerate(p.frames):
                if frames is None or f in frames:
                    p.positions[i] = v.copy()
        elif tag == "D":
            p = gmap.points[key[1]]
            p.positions[p.index(key[2])] = v.copy()
