"""Containers for everything the system estimates: the global map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose


@dataclass
class MapPoint:
    """A tracked point. Label 0 is static structure, ``l > 0`` an object.

    Per-frame records are kept in parallel lists ordered by frame:
    the observed pixel, the camera-frame measurement from depth and the
    current world-frame estimate.
    """

    point_id: int
    label: int = 0
    frames: list = field(default_factory=list)
    pixels: list = field(default_factory=list)
    measurements: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    inlier: list = field(default_factory=list)

    @property
    def track_len(self) -> int:
        return len(self.frames)

    @property
    def last_frame(self) -> int:
        return self.frames[-1]

    def add(self, frame, pixel, measurement, position, inlier=True):
        if self.frames and frame <= self.frames[-1]:
            raise ValueError(f"point {self.point_id}: frame {frame} not after {self.frames[-1]}")
        self.frames.append(int(frame))
        self.pixels.append(np.asarray(pixel, dtype=float).copy())
        self.measurements.append(np.asarray(measurement, dtype=float).copy())
        self.positions.append(np.asarray(position, dtype=float).copy())
        self.inlier.append(bool(inlier))

    def index(self, frame) -> int:
        return self.frames.index(frame)

    def position_at(self, frame) -> np.ndarray:
        return self.positions[self.frames.index(frame)]


@dataclass
class ObjectTrack:
    label: int
    motions: dict = field(default_factory=dict)       # frame -> Pose (world-frame motion k-1 -> k)
    point_ids: dict = field(default_factory=dict)     # frame -> list of point ids
    mask_ids: dict = field(default_factory=dict)      # frame -> instance id in that frame, 0 if propagated
    status: str = "dynamic"
    first_frame: int = 0
    last_seen_frame: int = 0
    missed: int = 0
    original_samples: int = 0

    @property
    def closed(self) -> bool:
        return self.status == "lost"


@dataclass
class GlobalMap:
    cameras: dict = field(default_factory=dict)       # frame -> Pose (camera to world)
    odometry: dict = field(default_factory=dict)      # frame k -> relative pose X_{k-1}^-1 X_k
    points: dict = field(default_factory=dict)        # id -> MapPoint
    objects: dict = field(default_factory=dict)       # label -> ObjectTrack
    next_point_id: int = 0

    def new_point(self, label=0) -> MapPoint:
        p = MapPoint(self.next_point_id, label)
        self.points[p.point_id] = p
        self.next_point_id += 1
        return p

    @property
    def frames(self) -> list:
        return sorted(self.cameras)

    def static_points(self):
        return [p for p in self.points.values() if p.label == 0]

    def dynamic_points(self):
        return [p for p in self.points.values() if p.label > 0]

    def motion_points(self, label, frame) -> np.ndarray:
        """World positions at ``frame - 1`` of the points behind motion ``frame``."""
        ids = self.objects[label].point_ids.get(frame, [])
        pts = [self.points[pid].position_at(frame - 1) for pid in ids
               if (frame - 1) in self.points[pid].frames]
        return np.asarray(pts, dtype=float).reshape(-1, 3)

    def refresh_positions(self, frames=None):
        """Recompute world positions from measurements and camera poses."""
        for p in self.points.values():
            for i, k in enumerate(p.frames):
                if frames is not None and k not in frames:
                    continue
                p.positions[i] = self.cameras[k].apply(p.measurements[i])

    def tracked_points(self, min_len: int) -> int:
        return sum(1 for p in self.points.values() if p.track_len >= min_len)

    def motion(self, label, frame) -> Pose | None:
        return self.objects[label].motions.get(frame)
