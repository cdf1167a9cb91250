"""On-disk sequence layout, trajectory files and the map dump.

Sequence directory::

    intrinsics.txt          fx fy cx cy width height
    depth/%06d.bin          b"DSDEPTH1", <u4 H, <u4 W, <f8 metres-per-unit, <u2 raster
    mask/%06d.bin           b"DSMASK01", <u4 H, <u4 W, <u2 raster (0 = static)
    flow/%06d.bin           b"DSFLOW32" | b"DSFLOW64", <u4 H, <u4 W, <f4|<f8 (H, W, 2)
    gt_cam.txt              optional: frame_id + 12 numbers (3x4 row-major)
    gt_obj.txt              optional: frame_id gt_id mask_label padded + 12 numbers

Flow at frame k is the forward flow from k-1 to k indexed by pixels of
frame k-1; frame 0 carries none.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptRaster, DataError, DimensionMismatch, MissingRequiredFile
from .geometry import CameraModel, Pose
from .worldmap import GlobalMap, MapPoint, ObjectTrack

DEPTH_MAGIC = b"DSDEPTH1"
MASK_MAGIC = b"DSMASK01"
FLOW_MAGICS = {b"DSFLOW32": "<f4", b"DSFLOW64": "<f8"}
DEFAULT_DEPTH_SCALE = 1.0 / 256.0
MAP_HEADER = "# dynslam-map v1"


@dataclass(frozen=True, eq=False)
class FrameBundle:
    frame_id: int
    depth: np.ndarray          # (H, W) metres, 0 = invalid
    mask: np.ndarray           # (H, W) int instance ids, 0 = static
    flow: np.ndarray | None    # (H, W, 2) pixels, k-1 -> k
    cam: CameraModel
    depth_scale: float = DEFAULT_DEPTH_SCALE

    def __post_init__(self):
        shape = self.cam.shape
        if self.depth.shape != shape or self.mask.shape != shape:
            raise DimensionMismatch(f"frame {self.frame_id}: rasters do not match {shape}")
        if self.flow is not None and self.flow.shape != shape + (2,):
            raise DimensionMismatch(f"frame {self.frame_id}: flow shape {self.flow.shape}")
        for arr in (self.depth, self.mask, self.flow):
            if arr is not None:
                arr.flags.writeable = False


@dataclass
class GroundTruth:
    camera_poses: dict = field(default_factory=dict)    # frame -> Pose
    object_poses: dict = field(default_factory=dict)    # (frame, gt_id) -> Pose
    mask_to_gt: dict = field(default_factory=dict)      # (frame, mask label) -> gt_id
    padded: dict = field(default_factory=dict)          # gt_id -> bool (rotation only about y)

    def object_ids(self):
        return sorted({g for (_, g) in self.object_poses})

    def visible_frames(self, gt_id):
        return sorted(k for (k, _), g in self.mask_to_gt.items() if g == gt_id)


# --------------------------------------------------------------------------- numbers

def fmt_float(x) -> str:
    """Shortest exact decimal for ``x``; integral values print without '.0'."""
    s = repr(float(x))
    if s.endswith(".0"):
        s = s[:-2]
    if s == "-0":
        s = "0"
    return s


def _pose_numbers(pose: Pose) -> list[str]:
    return [fmt_float(v) for v in pose.matrix[:3, :].reshape(-1)]


def _pose_from_numbers(vals) -> Pose:
    M = np.asarray([float(v) for v in vals], dtype=float).reshape(3, 4)
    return Pose(M[:, :3], M[:, 3])


# --------------------------------------------------------------------------- rasters

def _read_header(path: Path, data: bytes, magic_ok):
    if len(data) < 16:
        raise CorruptRaster("raster shorter than its header", path)
    magic = data[:8]
    if not magic_ok(magic):
        raise CorruptRaster(f"bad magic {magic!r}", path)
    h, w = struct.unpack_from("<II", data, 8)
    return magic, h, w


def write_depth(path, depth_m: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE):
    units = np.rint(np.asarray(depth_m, dtype=float) / scale)
    if units.min(initial=0) < 0 or units.max(initial=0) > 65535:
        raise DataError("depth outside the 16-bit range", path)
    h, w = units.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<IId", h, w, scale))
        f.write(units.astype("<u2").tobytes())


def read_depth(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    data = path.read_bytes()
    _, h, w = _read_header(path, data, lambda m: m == DEPTH_MAGIC)
    if len(data) < 24:
        raise CorruptRaster("truncated depth header", path)
    (scale,) = struct.unpack_from("<d", data, 16)
    body = data[24:]
    if len(body) != h * w * 2 or not scale > 0:
        raise CorruptRaster(f"expected {h}x{w} uint16 payload", path)
    units = np.frombuffer(body, dtype="<u2").reshape(h, w)
    return depth_from_units(units, scale), scale


def depth_from_units(units: np.ndarray, scale: float) -> np.ndarray:
    return units.astype(np.float64) * scale


def write_mask(path, mask: np.ndarray):
    m = np.asarray(mask)
    if m.min(initial=0) < 0 or m.max(initial=0) > 65535:
        raise DataError("mask labels outside the 16-bit range", path)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(MASK_MAGIC + struct.pack("<II", h, w))
        f.write(m.astype("<u2").tobytes())


def read_mask(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    _, h, w = _read_header(path, data, lambda m: m == MASK_MAGIC)
    body = data[16:]
    if len(body) != h * w * 2:
        raise CorruptRaster(f"expected {h}x{w} uint16 payload", path)
    return np.frombuffer(body, dtype="<u2").reshape(h, w).astype(np.int32)


def write_flow(path, flow: np.ndarray, precision: int = 64):
    flow = np.asarray(flow)
    h, w, c = flow.shape
    if c != 2:
        raise DataError("flow must have two channels", path)
    magic = b"DSFLOW64" if precision == 64 else b"DSFLOW32"
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", h, w))
        f.write(flow.astype(FLOW_MAGICS[magic]).tobytes())


def read_flow(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    magic, h, w = _read_header(path, data, lambda m: m in FLOW_MAGICS)
    dtype = np.dtype(FLOW_MAGICS[magic])
    body = data[16:]
    if len(body) != h * w * 2 * dtype.itemsize:
        raise CorruptRaster(f"expected {h}x{w}x2 {dtype} payload", path)
    flow = np.frombuffer(body, dtype=dtype).reshape(h, w, 2).astype(np.float64)
    if not np.all(np.isfinite(flow)):
        raise CorruptRaster("non-finite flow values", path)
    return flow


# --------------------------------------------------------------------------- sequences

def write_intrinsics(path, cam: CameraModel):
    Path(path).write_text(" ".join(fmt_float(v) for v in
                                   (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)) + "\n")


def read_intrinsics(path) -> CameraModel:
    path = Path(path)
    try:
        vals = path.read_text().split()
        fx, fy, cx, cy, w, h = (float(v) for v in vals[:6])
        return CameraModel(fx, fy, cx, cy, int(w), int(h))
    except (ValueError, TypeError) as exc:
        raise CorruptRaster(f"malformed intrinsics ({exc})", path) from None


class Sequence:
    """Lazily loaded sequence directory; iterate to get FrameBundles in order."""

    def __init__(self, root):
        self.root = Path(root)
        intr = self.root / "intrinsics.txt"
        if not intr.is_file():
            raise MissingRequiredFile("missing intrinsics", intr)
        self.cam = read_intrinsics(intr)
        depth_dir = self.root / "depth"
        if not depth_dir.is_dir():
            raise MissingRequiredFile("missing depth directory", depth_dir)
        ids = []
        for p in depth_dir.glob("*.bin"):
            try:
                ids.append(int(p.stem))
            except ValueError:
                continue
        if not ids:
            raise MissingRequiredFile("no depth frames", depth_dir)
        self.frame_ids = sorted(ids)
        self.ground_truth = read_ground_truth(self.root)

    def __len__(self):
        return len(self.frame_ids)

    def load(self, frame_id: int, first: bool = False) -> FrameBundle:
        name = f"{frame_id:06d}.bin"
        dpath, mpath, fpath = (self.root / d / name for d in ("depth", "mask", "flow"))
        for p in (dpath, mpath):
            if not p.is_file():
                raise MissingRequiredFile("missing raster", p)
        depth, scale = read_depth(dpath)
        mask = read_mask(mpath)
        flow = None
        if fpath.is_file():
            flow = read_flow(fpath)
        elif not first:
            raise MissingRequiredFile("missing flow for non-initial frame", fpath)
        shape = self.cam.shape
        for arr, p in ((depth, dpath), (mask, mpath), (flow, fpath)):
            if arr is not None and arr.shape[:2] != shape:
                raise DimensionMismatch(f"raster {arr.shape[:2]} vs intrinsics {shape}", p)
        return FrameBundle(frame_id, depth, mask, flow, self.cam, scale)

    def __iter__(self):
        for i, k in enumerate(self.frame_ids):
            yield self.load(k, first=(i == 0))


def load_sequence(root, config=None) -> Sequence:
    """Open a sequence directory. ``config`` is accepted for interface symmetry."""
    del config
    return Sequence(root)


def write_sequence(root, frames, ground_truth: GroundTruth | None = None, flow_precision=64):
    root = Path(root)
    for d in ("depth", "mask", "flow"):
        (root / d).mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    write_intrinsics(root / "intrinsics.txt", frames[0].cam)
    for fb in frames:
        name = f"{fb.frame_id:06d}.bin"
        write_depth(root / "depth" / name, fb.depth, fb.depth_scale)
        write_mask(root / "mask" / name, fb.mask)
        if fb.flow is not None:
            write_flow(root / "flow" / name, fb.flow, flow_precision)
    if ground_truth is not None:
        write_ground_truth(root, ground_truth)


def write_ground_truth(root, gt: GroundTruth):
    root = Path(root)
    lines = [" ".join([str(k)] + _pose_numbers(gt.camera_poses[k])) for k in sorted(gt.camera_poses)]
    (root / "gt_cam.txt").write_text("\n".join(lines) + "\n")
    inv = {(k, g): m for (k, m), g in gt.mask_to_gt.items()}
    lines = []
    for (k, g) in sorted(gt.object_poses):
        lines.append(" ".join([str(k), str(g), str(inv.get((k, g), 0)),
                               str(int(gt.padded.get(g, False)))] + _pose_numbers(gt.object_poses[(k, g)])))
    (root / "gt_obj.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def read_ground_truth(root) -> GroundTruth | None:
    root = Path(root)
    cam_path, obj_path = root / "gt_cam.txt", root / "gt_obj.txt"
    if not cam_path.is_file() and not obj_path.is_file():
        return None
    gt = GroundTruth()
    try:
        if cam_path.is_file():
            for line in cam_path.read_text().splitlines():
                if line.strip() and not line.startswith("#"):
                    vals = line.split()
                    gt.camera_poses[int(vals[0])] = _pose_from_numbers(vals[1:13])
        if obj_path.is_file():
            for line in obj_path.read_text().splitlines():
                if line.strip() and not line.startswith("#"):
                    vals = line.split()
                    k, g, m, pad = (int(v) for v in vals[:4])
                    gt.object_poses[(k, g)] = _pose_from_numbers(vals[4:16])
                    if m > 0:
                        gt.mask_to_gt[(k, m)] = g
                    gt.padded[g] = bool(pad)
    except (ValueError, IndexError) as exc:
        raise CorruptRaster(f"malformed ground truth ({exc})", root) from None
    return gt


# --------------------------------------------------------------------------- trajectories

def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) with qw >= 0."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def quaternion_to_rotation(q) -> np.ndarray:
    x, y, z, w = (float(v) for v in q)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def _fmt_quat(x) -> str:
    # 12 decimals: stable under the quaternion -> matrix -> quaternion round trip
    s = f"{x:.12f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "", "-") else s


def _stable_quat(R) -> list[str]:
    """Printed quaternion that reproduces itself after parse -> matrix -> quaternion.

    Rounding and re-normalisation can move the last printed digit; iterating to the
    fixed point makes write -> read -> write byte-identical.
    """
    txt = [_fmt_quat(v) for v in rotation_to_quaternion(R)]
    for _ in range(8):
        nxt = [_fmt_quat(v) for v in rotation_to_quaternion(quaternion_to_rotation(txt))]
        if nxt == txt:
            break
        txt = nxt
    return txt


def _as_items(poses):
    if isinstance(poses, dict):
        return sorted(poses.items())
    return list(enumerate(poses))


def write_trajectory(poses, path, format="kitti"):
    items = _as_items(poses)
    if not items:
        raise ValueError("empty pose sequence")
    lines = []
    for k, pose in items:
        if format == "tum":
            lines.append(" ".join([str(k)] + [fmt_float(v) for v in pose.t] + _stable_quat(pose.R)))
        elif format == "kitti":
            lines.append(" ".join(_pose_numbers(pose)))
        else:
            raise ValueError(f"unknown trajectory format {format!r}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write trajectory ({exc})", path) from exc


def read_trajectory(path, format="kitti") -> dict:
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        vals = line.split()
        if not vals:
            continue
        if format == "tum":
            t = [float(v) for v in vals[1:4]]
            out[int(float(vals[0]))] = Pose(quaternion_to_rotation(vals[4:8]), t)
        else:
            out[i] = _pose_from_numbers(vals[:12])
    return out


# --------------------------------------------------------------------------- map dump

def write_map(gmap: GlobalMap, path):
    """Text dump of the map. Records are ordered by frame, then id.

    ``camera k <3x4>``; ``odometry k <3x4>``; ``object l status first last``;
    ``mask k l mask_id`` (0 when the mask was propagated); ``motion k l <3x4>``;
    ``support k l ids...`` (points behind motion k); ``point k id label inlier
    u v x y z zx zy zz`` where ``x y z`` is the world estimate and ``zx zy zz``
    the camera-frame measurement.
    """
    lines = [MAP_HEADER,
             "# camera frame r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2",
             "# odometry frame <3x4>",
             "# object label status first_frame last_seen_frame",
             "# mask frame label mask_id",
             "# motion frame label <3x4>",
             "# support frame label point_id...",
             "# point frame point_id label inlier u v x y z zx zy zz"]
    for k in sorted(gmap.cameras):
        lines.append(" ".join(["camera", str(k)] + _pose_numbers(gmap.cameras[k])))
    for k in sorted(gmap.odometry):
        lines.append(" ".join(["odometry", str(k)] + _pose_numbers(gmap.odometry[k])))
    for l in sorted(gmap.objects):
        o = gmap.objects[l]
        lines.append(f"object {l} {o.status} {o.first_frame} {o.last_seen_frame}")
    masks = sorted((k, l, m) for l, o in gmap.objects.items() for k, m in o.mask_ids.items())
    lines += [f"mask {k} {l} {m}" for k, l, m in masks]
    for k, l in sorted((k, l) for l, o in gmap.objects.items() for k in o.motions):
        o = gmap.objects[l]
        lines.append(" ".join(["motion", str(k), str(l)] + _pose_numbers(o.motions[k])))
        if k in o.point_ids:
            lines.append(" ".join(["support", str(k), str(l)] + [str(i) for i in o.point_ids[k]]))
    records = []
    for p in gmap.points.values():
        for i, k in enumerate(p.frames):
            records.append((k, p.point_id, p.label, p.inlier[i], p.pixels[i], p.positions[i], p.measurements[i]))
    records.sort(key=lambda r: (r[0], r[1]))
    for k, pid, label, inl, px, x, z in records:
        nums = [fmt_float(v) for v in (*px, *x, *z)]
        lines.append(" ".join(["point", str(k), str(pid), str(label), str(int(inl))] + nums))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write map ({exc})", path) from exc


def read_map(path) -> GlobalMap:
    path = Path(path)
    gmap = GlobalMap()
    text = path.read_text().splitlines()
    if not text or text[0] != MAP_HEADER:
        raise CorruptRaster("not a dynslam map file", path)
    try:
        for line in text[1:]:
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            kind = vals[0]
            if kind == "camera":
                gmap.cameras[int(vals[1])] = _pose_from_numbers(vals[2:14])
            elif kind == "odometry":
                gmap.odometry[int(vals[1])] = _pose_from_numbers(vals[2:14])
            elif kind == "object":
                l = int(vals[1])
                gmap.objects[l] = ObjectTrack(l, status=vals[2], first_frame=int(vals[3]),
                                              last_seen_frame=int(vals[4]))
            elif kind == "mask":
                k, l, m = int(vals[1]), int(vals[2]), int(vals[3])
                gmap.objects.setdefault(l, ObjectTrack(l)).mask_ids[k] = m
            elif kind == "motion":
                k, l = int(vals[1]), int(vals[2])
                if len(vals) != 15:
                    raise ValueError(f"motion record needs 12 numbers, got {len(vals) - 3}")
                gmap.objects.setdefault(l, ObjectTrack(l)).motions[k] = _pose_from_numbers(vals[3:15])
            elif kind == "support":
                k, l = int(vals[1]), int(vals[2])
                gmap.objects.setdefault(l, ObjectTrack(l)).point_ids[k] = [int(v) for v in vals[3:]]
            elif kind == "point":
                k, pid, label, inl = (int(v) for v in vals[1:5])
                nums = [float(v) for v in vals[5:16]]
                p = gmap.points.get(pid)
                if p is None:
                    p = gmap.points[pid] = MapPoint(pid, label)
                p.add(k, nums[0:2], nums[5:8], nums[2:5], bool(inl))
            else:
                raise ValueError(f"unknown record {kind!r}")
    except (ValueError, IndexError) as exc:
        raise CorruptRaster(f"malformed map ({exc})", path) from None
    gmap.next_point_id = max(gmap.points, default=-1) + 1
    return gmap
