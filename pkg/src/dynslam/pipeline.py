"""End-to-end run: tracking, sliding-window and batch optimisation, outputs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, dump_config
from .dataio import GroundTruth, fmt_float, write_map, write_trajectory
from .errors import EmptyMap
from .evaluation import Estimates, SequenceReport, object_velocity, sequence_report, speed_kmh, write_report
from .geometry import CameraModel
from .graph import global_optimize, local_window_optimize
from .tracking.frontend import Tracker

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    tracker: Tracker
    local_reports: dict = field(default_factory=dict)     # frame -> SolverReport
    global_report: object = None
    graph: object = None
    tracking_estimates: Estimates | None = None           # snapshot before the batch step
    report: SequenceReport | None = None

    @property
    def map(self):
        return self.tracker.map


def run_sequence(frames, cam: CameraModel, cfg: RunConfig | None = None, gt: GroundTruth | None = None,
                 output=None) -> RunResult:
    """Process ``frames`` (FrameBundles in order) and optionally write artifacts to ``output``."""
    cfg = cfg or RunConfig()
    cfg.validate()
    tracker = Tracker(cam, cfg)
    res = RunResult(tracker)
    for fb in frames:
        tracker.process(fb)
        k = fb.frame_id
        if cfg.local_ba and len(tracker.map.cameras) > 1:
            res.local_reports[k] = local_window_optimize(tracker.map, k, cfg.window_size, cfg.graph)
    res.tracking_estimates = Estimates.from_map(tracker.map)
    if cfg.global_ba:
        try:
            res.graph, res.global_report = global_optimize(tracker.map, cfg.graph, cfg.noise.min_track_len_graph,
                                                           cfg.smooth_motion)
        except EmptyMap as exc:
            log.warning("batch optimisation skipped: %s", exc)
    if gt is not None:
        res.report = sequence_report(tracker.map, gt, cfg.frame_rate)
    if output is not None:
        write_outputs(res, cfg, output)
    return res


def motion_lines(gmap, label: int, frame_rate: float) -> list[str]:
    """``frame r11 ... t3 speed_kmh`` per estimated motion of one object."""
    obj = gmap.objects[label]
    lines = []
    for k in sorted(obj.motions):
        H = obj.motions[k]
        pts = gmap.motion_points(label, k)
        speed = speed_kmh(object_velocity(H, pts), frame_rate) if len(pts) else float("nan")
        nums = [fmt_float(v) for v in H.matrix[:3, :].ravel()]
        lines.append(" ".join([str(k), *nums, fmt_float(speed)]))
    return lines


def write_outputs(res: RunResult, cfg: RunConfig, output) -> Path:
    out = Path(output)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    gmap = res.map
    write_trajectory(gmap.cameras, out / "camera_trajectory.txt", "kitti")
    write_trajectory(gmap.cameras, out / "camera_trajectory_tum.txt", "tum")
    for l in sorted(gmap.objects):
        if gmap.objects[l].motions:
            (out / "objects" / f"object_{l}.txt").write_text("\n".join(motion_lines(gmap, l, cfg.frame_rate)) + "\n")
    write_map(gmap, out / "map.txt")
    dump_config(cfg, out / "config.yaml")
    if res.report is not None:
        write_report(res.report, out / "report")
    return out
