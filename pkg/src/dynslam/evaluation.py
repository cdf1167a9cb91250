"""Error metrics, velocity extraction and per-sequence reports."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import GroundTruth, fmt_float
from .errors import FrameMismatch, NoPoints
from .geometry import Pose, so3_log
from .worldmap import GlobalMap


@dataclass(frozen=True)
class MotionError:
    E_t: float      # metres
    E_r: float      # degrees


def _angle_deg(R) -> float:
    return math.degrees(float(np.linalg.norm(so3_log(R, check_pi=False))))


def yaw_deg(R) -> float:
    """Rotation about the camera-style vertical axis (y)."""
    return abs(math.degrees(math.atan2(R[0, 2] - R[2, 0], R[0, 0] + R[2, 2])))


def pose_change_error(T_gt: Pose, T_est: Pose, yaw_only: bool = False) -> MotionError:
    """Error of an estimated pose change: ``E = T_est^-1 T_gt``.

    With ``yaw_only`` (ground truth that only encodes heading) rotation
    about y alone counts towards ``E_r``.
    """
    E = T_est.inverse() @ T_gt
    e_r = yaw_deg(E.R) if yaw_only else _angle_deg(E.R)
    return MotionError(float(np.linalg.norm(E.t)), e_r)


def body_frame_motion(L_prev: Pose, H: Pose) -> Pose:
    """World-frame motion expressed in the body frame at ``k-1``: ``L^-1 H L``."""
    return L_prev.inverse() @ H @ L_prev


def object_velocity(H: Pose, points) -> np.ndarray:
    """Mean per-frame displacement ``t - (I - R) c`` of points (world frame at ``k-1``)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise NoPoints("object velocity needs at least one point")
    c = pts.mean(axis=0)
    return H.t - (np.eye(3) - H.R) @ c


def speed_kmh(v, frame_rate: float) -> float:
    return float(np.linalg.norm(v)) * frame_rate * 3.6


def speed_error(v_est, v_gt) -> float:
    """Signed difference of speed magnitudes ``|v_est| - |v_gt|``."""
    return float(np.linalg.norm(v_est) - np.linalg.norm(v_gt))


def rmse(values) -> float:
    a = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(a * a))) if a.size else float("nan")


# --------------------------------------------------------------------------- estimates container

@dataclass
class Estimates:
    cameras: dict                                     # frame -> Pose
    motions: dict = field(default_factory=dict)       # label -> {frame: Pose}
    centroids: dict = field(default_factory=dict)     # label -> {frame: world centroid at frame - 1}
    mask_ids: dict = field(default_factory=dict)      # label -> {frame: mask id, 0 when propagated}

    @classmethod
    def from_map(cls, gmap: GlobalMap) -> "Estimates":
        est = cls(dict(gmap.cameras))
        for l, obj in gmap.objects.items():
            if not obj.motions:
                continue
            est.motions[l] = dict(obj.motions)
            est.mask_ids[l] = dict(obj.mask_ids)
            cents = {}
            for k in obj.motions:
                pts = gmap.motion_points(l, k)
                if len(pts):
                    cents[k] = pts.mean(axis=0)
            est.centroids[l] = cents
        return est


def associate(est: Estimates, gt: GroundTruth) -> dict:
    """Estimated label -> ground-truth id by majority over frames with an instance mask."""
    out = {}
    for l, masks in est.mask_ids.items():
        votes = Counter(gt.mask_to_gt[(k, j)] for k, j in masks.items() if j > 0 and (k, j) in gt.mask_to_gt)
        if votes:
            best = max(votes.values())
            out[l] = min(g for g, c in votes.items() if c == best)
    return out


@dataclass
class ObjectReport:
    label: int
    gt_id: int
    frames: list = field(default_factory=list)
    E_t: list = field(default_factory=list)
    E_r: list = field(default_factory=list)
    speed_est: list = field(default_factory=list)   # km/h
    speed_gt: list = field(default_factory=list)
    E_s: list = field(default_factory=list)         # km/h, signed
    track_ratio: float = 0.0

    @property
    def rmse_t(self):
        return rmse(self.E_t)

    @property
    def rmse_r(self):
        return rmse(self.E_r)

    @property
    def mean_abs_es(self):
        return float(np.mean(np.abs(self.E_s))) if self.E_s else float("nan")

    def summary(self) -> dict:
        return {"label": self.label, "gt_id": self.gt_id, "frames": len(self.frames), "rmse_t": self.rmse_t,
                "rmse_r": self.rmse_r, "track_ratio": self.track_ratio, "mean_abs_es": self.mean_abs_es}


@dataclass
class SequenceReport:
    frames: list = field(default_factory=list)
    cam_E_t: list = field(default_factory=list)
    cam_E_r: list = field(default_factory=list)
    objects: dict = field(default_factory=dict)     # label -> ObjectReport

    @property
    def cam_rmse_t(self):
        return rmse(self.cam_E_t)

    @property
    def cam_rmse_r(self):
        return rmse(self.cam_E_r)

    def summary(self) -> dict:
        return {"camera": {"frames": len(self.frames), "rmse_t": self.cam_rmse_t, "rmse_r": self.cam_rmse_r},
                "objects": [self.objects[l].summary() for l in sorted(self.objects)]}


def sequence_report(est: Estimates | GlobalMap, gt: GroundTruth, frame_rate: float = 10.0) -> SequenceReport:
    """Per-frame camera and object errors against ground truth.

    Camera errors compare consecutive pose changes. Object motions are
    moved into the ground-truth world frame, then compared in the body
    frame of the ground-truth pose at ``k-1``. Velocities use the
    centroid of the estimated points when present, else the ground-truth
    body origin.
    """
    if isinstance(est, GlobalMap):
        est = Estimates.from_map(est)
    ef, gf = sorted(est.cameras), set(gt.camera_poses)
    missing = [k for k in ef if k not in gf]
    if missing or not ef:
        raise FrameMismatch(f"estimated frames absent from ground truth: {missing[:5]}" if missing
                            else "no estimated frames")
    rep = SequenceReport()
    k0 = ef[0]
    A = gt.camera_poses[k0] @ est.cameras[k0].inverse()     # estimate world -> ground-truth world
    Ainv = A.inverse()
    for a, b in zip(ef[:-1], ef[1:]):
        T_gt = gt.camera_poses[a].inverse() @ gt.camera_poses[b]
        T_est = est.cameras[a].inverse() @ est.cameras[b]
        e = pose_change_error(T_gt, T_est)
        rep.frames.append(b)
        rep.cam_E_t.append(e.E_t)
        rep.cam_E_r.append(e.E_r)
    assoc = associate(est, gt)
    for l in sorted(assoc):
        g = assoc[l]
        o = ObjectReport(l, g)
        for k in sorted(est.motions[l]):
            if (k, g) not in gt.object_poses or (k - 1, g) not in gt.object_poses:
                continue
            L_prev, L_k = gt.object_poses[(k - 1, g)], gt.object_poses[(k, g)]
            H_gt = L_k @ L_prev.inverse()
            H_est = A @ est.motions[l][k] @ Ainv
            e = pose_change_error(body_frame_motion(L_prev, H_gt), body_frame_motion(L_prev, H_est),
                                  yaw_only=bool(gt.padded.get(g, False)))
            c = est.centroids.get(l, {}).get(k)
            c = L_prev.t if c is None else A.apply(c)
            v_est, v_gt = object_velocity(H_est, c), object_velocity(H_gt, c)
            o.frames.append(k)
            o.E_t.append(e.E_t)
            o.E_r.append(e.E_r)
            o.speed_est.append(speed_kmh(v_est, frame_rate))
            o.speed_gt.append(speed_kmh(v_gt, frame_rate))
            o.E_s.append(o.speed_est[-1] - o.speed_gt[-1])
        seen = set(gt.visible_frames(g))
        tracked = (set(est.mask_ids.get(l, {})) | set(est.motions[l])) & seen
        o.track_ratio = len(tracked) / len(seen) if seen else 0.0
        rep.objects[l] = o
    return rep


# --------------------------------------------------------------------------- output

def _table(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(x if isinstance(x, str) else fmt_float(x) for x in r) + "\n")


def _series(path, frames, values):
    with open(path, "w") as fh:
        for k, v in zip(frames, values):
            fh.write(f"{k} {fmt_float(v)}\n")


def summary_text(rep: SequenceReport) -> str:
    lines = [f"camera  frames={len(rep.frames)}  rmse_t={rep.cam_rmse_t:.6f} m  rmse_r={rep.cam_rmse_r:.6f} deg"]
    for l in sorted(rep.objects):
        o = rep.objects[l]
        lines.append(f"object {l} (gt {o.gt_id})  frames={len(o.frames)}  rmse_t={o.rmse_t:.6f} m  "
                     f"rmse_r={o.rmse_r:.6f} deg  track_ratio={o.track_ratio:.3f}  mean|E_s|={o.mean_abs_es:.4f} km/h")
    return "\n".join(lines) + "\n"


def write_report(rep: SequenceReport, outdir) -> Path:
    """CSV tables, a text summary, JSON and plot-ready ``frame value`` series under ``outdir``."""
    out = Path(outdir)
    (out / "series").mkdir(parents=True, exist_ok=True)
    _table(out / "camera_errors.csv", ["frame", "E_t", "E_r"], zip(rep.frames, rep.cam_E_t, rep.cam_E_r))
    rows = []
    for l in sorted(rep.objects):
        o = rep.objects[l]
        rows += [[str(l), str(o.gt_id), str(k), *vals]
                 for k, *vals in zip(o.frames, o.E_t, o.E_r, o.speed_est, o.speed_gt, o.E_s)]
    _table(out / "object_errors.csv", ["label", "gt_id", "frame", "E_t", "E_r", "speed_est", "speed_gt", "E_s"], rows)
    _table(out / "object_summary.csv", ["label", "gt_id", "frames", "rmse_t", "rmse_r", "track_ratio", "mean_abs_es"],
           [[str(s["label"]), str(s["gt_id"]), str(s["frames"]), s["rmse_t"], s["rmse_r"], s["track_ratio"],
             s["mean_abs_es"]] for s in rep.summary()["objects"]])
    (out / "summary.txt").write_text(summary_text(rep))
    with open(out / "report.json", "w") as fh:
        json.dump(rep.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _series(out / "series" / "camera_E_t.txt", rep.frames, rep.cam_E_t)
    _series(out / "series" / "camera_E_r.txt", rep.frames, rep.cam_E_r)
    for l, o in rep.objects.items():
        for name in ("E_t", "E_r", "speed_est", "speed_gt", "E_s"):
            _series(out / "series" / f"object_{l}_{name}.txt", o.frames, getattr(o, name))
    return out


def median_summary(summaries: list[dict]) -> dict:
    """Per-metric medians over runs, each metric taken independently. Objects are matched by gt id."""
    if not summaries:
        raise ValueError("no runs to aggregate")
    cam = {m: float(np.median([s["camera"][m] for s in summaries])) for m in ("rmse_t", "rmse_r")}
    by_gt = {}
    for s in summaries:
        for o in s["objects"]:
            by_gt.setdefault(o["gt_id"], []).append(o)
    objs = []
    for g in sorted(by_gt):
        entry = {"gt_id": g, "runs": len(by_gt[g])}
        for m in ("rmse_t", "rmse_r", "track_ratio", "mean_abs_es"):
            entry[m] = float(np.median([o[m] for o in by_gt[g]]))
        objs.append(entry)
    return {"runs": len(summaries), "camera": cam, "objects": objs}
