"""Synthetic multi-body scenes with exact ground truth.

Static structure and rigid objects are point clouds splatted to single
pixels with a z-buffer. Depth is quantised to the 16-bit raster first and
each valid pixel's generating point is defined as the back-projection of the
pixel centre at that quantised depth, so the stored flow is the exact
displacement of a point the estimator can measure.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import kernels
from ..dataio import DEFAULT_DEPTH_SCALE, FrameBundle, GroundTruth
from ..errors import ConfigInvalid
from ..geometry import CameraModel, Pose, exp_se3, so3_exp

NEAR_CLIP = 0.1
# flow written where the generating point ends up behind the next camera
BEHIND_FLOW = -1.0e6


def pose_from_vector(v) -> Pose:
    v = np.asarray(v, dtype=float)
    return Pose(so3_exp(v[3:]), v[:3])


@dataclass
class Trajectory:
    """Pose sequence ``P_k`` from an initial pose and per-frame body twists.

    ``initial``, ``pivot`` and ``offset`` are poses written as a translation
    followed by a rotation vector. ``constant``: ``P_k = P_{k-1} exp(twist)``. ``piecewise``: ``segments`` is
    a list of ``[n_frames, twist]`` applied in turn (the last repeats).
    ``swing``: ``P_k = pivot exp(theta_k axis) offset`` with
    ``theta_k = amplitude sin(2 pi k / period + phase)``.
    """

    kind: str = "constant"
    initial: list = field(default_factory=lambda: [0.0] * 6)
    twist: list = field(default_factory=lambda: [0.0] * 6)
    segments: list = field(default_factory=list)
    pivot: list = field(default_factory=lambda: [0.0] * 6)
    offset: list = field(default_factory=lambda: [0.0] * 6)
    axis: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    amplitude: float = 0.0
    period: float = 20.0
    phase: float = 0.0

    def validate(self):
        if self.kind not in ("constant", "piecewise", "swing"):
            raise ConfigInvalid(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "piecewise" and not self.segments:
            raise ConfigInvalid("piecewise trajectory needs segments")
        if self.kind == "swing" and self.period <= 0:
            raise ConfigInvalid("swing period must be positive")

    def twist_at(self, k: int) -> np.ndarray:
        """Body twist taking ``P_{k-1}`` to ``P_k`` (constant / piecewise)."""
        if self.kind == "constant":
            return np.asarray(self.twist, dtype=float)
        i = 0
        for n, tw in self.segments:
            i += int(n)
            if k <= i:
                return np.asarray(tw, dtype=float)
        return np.asarray(self.segments[-1][1], dtype=float)

    def poses(self, frames: int) -> list[Pose]:
        if self.kind == "swing":
            C, B = pose_from_vector(self.pivot), pose_from_vector(self.offset)
            ax = np.asarray(self.axis, dtype=float)
            ax = ax / np.linalg.norm(ax)
            out = []
            for k in range(frames):
                th = self.amplitude * np.sin(2 * np.pi * k / self.period + self.phase)
                out.append(C @ exp_se3(np.concatenate([np.zeros(3), th * ax])) @ B)
            return out
        P = pose_from_vector(self.initial)
        out = [P]
        for k in range(1, frames):
            P = P @ exp_se3(self.twist_at(k))
            out.append(P)
        return out


@dataclass
class ObjectSpec:
    shape: str = "box"                  # box | sphere | blob
    size: list = field(default_factory=lambda: [1.8, 1.5, 4.2])
    count: int = 20000
    trajectory: Trajectory = field(default_factory=Trajectory)

    def validate(self):
        if self.shape not in ("box", "sphere", "blob"):
            raise ConfigInvalid(f"unknown object shape {self.shape!r}")
        if self.count < 1 or min(self.size) <= 0:
            raise ConfigInvalid("object count and size must be positive")
        self.trajectory.validate()


@dataclass
class Background:
    kind: str = "street"                # street | room | blob
    count: int = 100000
    extent: list = field(default_factory=lambda: [10.0, 1.6, 6.0, -5.0, 120.0])

    def validate(self):
        if self.kind not in ("street", "room", "blob"):
            raise ConfigInvalid(f"unknown background kind {self.kind!r}")
        if self.count < 0:
            raise ConfigInvalid("background count must be non-negative")


@dataclass
class NoiseSpec:
    pixel_std: float = 0.0
    depth_std: float = 0.0
    flow_std: float = 0.0
    outlier_fraction: float = 0.0

    def validate(self):
        if min(self.pixel_std, self.depth_std, self.flow_std) < 0:
            raise ConfigInvalid("noise std must be non-negative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigInvalid("outlier_fraction must lie in [0, 1]")


@dataclass
class SceneScript:
    seed: int = 0
    frames: int = 10
    camera: list = field(default_factory=lambda: [500.0, 500.0, 320.0, 120.0, 640, 240])
    camera_trajectory: Trajectory = field(default_factory=Trajectory)
    background: Background = field(default_factory=Background)
    objects: list = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    depth_scale: float = DEFAULT_DEPTH_SCALE

    @property
    def cam(self) -> CameraModel:
        fx, fy, cx, cy, w, h = self.camera
        return CameraModel(float(fx), float(fy), float(cx), float(cy), int(w), int(h))

    def validate(self):
        if self.frames < 1:
            raise ConfigInvalid("frames must be >= 1")
        try:
            self.cam
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"bad camera: {exc}") from None
        if not self.depth_scale > 0:
            raise ConfigInvalid("depth_scale must be positive")
        self.camera_trajectory.validate()
        if self.camera_trajectory.kind == "swing":
            raise ConfigInvalid("camera trajectory cannot swing")
        self.background.validate()
        self.noise.validate()
        for o in self.objects:
            o.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        d = copy.deepcopy(d)
        try:
            s = cls(**{k: v for k, v in d.items()
                       if k not in ("camera_trajectory", "background", "objects", "noise")})
            if "camera_trajectory" in d:
                s.camera_trajectory = Trajectory(**d["camera_trajectory"])
            if "background" in d:
                s.background = Background(**d["background"])
            if "noise" in d:
                s.noise = NoiseSpec(**d["noise"])
            objs = []
            for o in d.get("objects", []):
                o = dict(o)
                tr = Trajectory(**o.pop("trajectory", {}))
                objs.append(ObjectSpec(trajectory=tr, **o))
            s.objects = objs
        except TypeError as exc:
            raise ConfigInvalid(f"bad scene script: {exc}") from None
        return s.validate()


# --------------------------------------------------------------------------- clouds

def _box_points(rng, size, n):
    lx, ly, lz = size
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    p = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([lx, ly, lz])
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    p[np.arange(n), axis] = sign * np.array([lx, ly, lz])[axis]
    return p


def object_cloud(spec: ObjectSpec, rng) -> np.ndarray:
    if spec.shape == "box":
        return _box_points(rng, spec.size, spec.count)
    if spec.shape == "sphere":
        d = rng.normal(size=(spec.count, 3))
        return spec.size[0] * d / np.linalg.norm(d, axis=1, keepdims=True)
    return rng.normal(size=(spec.count, 3)) * np.asarray(spec.size, dtype=float)


def background_cloud(bg: Background, rng) -> np.ndarray:
    n = bg.count
    if n == 0:
        return np.zeros((0, 3))
    if bg.kind == "blob":
        return rng.normal(size=(n, 3)) * np.asarray(bg.extent[:3]) + np.asarray(bg.extent[3:6])
    if bg.kind == "street":
        half, height, wall, z0, z1 = bg.extent
        n_ground = n // 2
        n_wall = n - n_ground
        g = np.stack([rng.uniform(-half, half, n_ground), np.full(n_ground, height),
                      rng.uniform(z0, z1, n_ground)], axis=1)
        side = np.where(rng.random(n_wall) < 0.5, -half, half)
        wl = np.stack([side, rng.uniform(height - wall, height, n_wall), rng.uniform(z0, z1, n_wall)], axis=1)
        return np.concatenate([g, wl])
    # room: floor, back wall and two side walls
    half, height, ceiling, z0, z1 = bg.extent
    parts = rng.choice(4, size=n, p=[0.3, 0.3, 0.2, 0.2])
    p = np.stack([rng.uniform(-half, half, n), rng.uniform(height - ceiling, height, n),
                  rng.uniform(z0, z1, n)], axis=1)
    p[parts == 0, 1] = height
    p[parts == 1, 2] = z1
    p[parts == 2, 0] = -half
    p[parts == 3, 0] = half
    return p


# --------------------------------------------------------------------------- rendering

@dataclass
class SimFrame:
    """Per-frame rendering internals kept for oracles and tests."""

    owner: np.ndarray        # (H, W) -1 empty, 0 static, g > 0 ground-truth object id
    depth_true: np.ndarray   # (H, W) quantised noise-free depth
    points_world: np.ndarray  # (H, W, 3) generating point of each valid pixel
    flow_true: np.ndarray | None


@dataclass
class Simulation:
    script: SceneScript
    frames: list
    gt: GroundTruth
    internals: list
    body_clouds: list
    static_cloud: np.ndarray

    @property
    def cam(self) -> CameraModel:
        return self.script.cam


def _render(cam, clouds, X: Pose, scale):
    """Z-buffer splat of world clouds; returns owner raster and quantised depth."""
    allp = np.concatenate(clouds)
    owner_of = np.concatenate([np.full(len(c), i, dtype=np.int64) for i, c in enumerate(clouds)])
    pc = X.inverse().apply(allp)
    z = pc[:, 2]
    front = z > NEAR_CLIP
    uv = np.zeros((len(z), 2))
    uv[front] = cam.project_points(pc[front])
    ui = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    vi = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    zz = np.where(front, z, -1.0)
    winner = kernels.zbuffer(ui, vi, zz, cam.width, cam.height)
    owner = np.full(cam.shape, -1, dtype=np.int64)
    depth = np.zeros(cam.shape)
    ok = winner >= 0
    owner[ok] = owner_of[winner[ok]]
    units = np.rint(z[winner[ok]] / scale)
    valid = (units >= 1) & (units <= 65535)
    depth_vals = units * scale
    depth[ok] = np.where(valid, depth_vals, 0.0)
    owner[ok] = np.where(valid, owner[ok], -1)
    return owner, depth, winner


def simulate(script: SceneScript) -> Simulation:
    """Render a script into frame bundles plus ground truth and oracle internals."""
    script.validate()
    cam = script.cam
    rng = np.random.default_rng([int(script.seed), 0])
    static = background_cloud(script.background, rng)
    bodies = [object_cloud(o, rng) for o in script.objects]
    n_frames = script.frames
    X = script.camera_trajectory.poses(n_frames)
    first = X[0].inverse()
    X = [first @ x for x in X]               # world frame = first camera
    L = [[first @ p for p in o.trajectory.poses(n_frames)] for o in script.objects]

    gt = GroundTruth()
    owners, depth_true, gen_world = [], [], []
    for k in range(n_frames):
        gt.camera_poses[k] = X[k]
        clouds = [static] + [L[g][k].apply(bodies[g]) for g in range(len(bodies))]
        owner, depth, _ = _render(cam, clouds, X[k], script.depth_scale)
        vs, us = np.nonzero(owner >= 0)
        pts = np.zeros(cam.shape + (3,))
        pc = cam.backproject_points(np.stack([us, vs], 1).astype(float), depth[vs, us])
        pts[vs, us] = X[k].apply(pc)
        owners.append(owner)
        depth_true.append(depth)
        gen_world.append(pts)
        for g in range(len(bodies)):
            gt.object_poses[(k, g + 1)] = L[g][k]
            gt.padded[g + 1] = False

    frames, internals = [], []
    for k in range(n_frames):
        nrng = np.random.default_rng([int(script.seed), k, 1])
        owner = owners[k]
        # dense, per-frame permuted instance ids for visible objects
        visible = [g for g in range(1, len(bodies) + 1) if np.any(owner == g)]
        perm = nrng.permutation(len(visible)) + 1
        mask = np.zeros(cam.shape, dtype=np.int32)
        for g, j in zip(visible, perm):
            mask[owner == g] = j
            gt.mask_to_gt[(k, int(j))] = g
        depth = depth_true[k]
        valid = owner >= 0
        if script.noise.depth_std > 0:
            noisy = depth + nrng.normal(0.0, script.noise.depth_std, depth.shape)
            units = np.clip(np.rint(noisy / script.depth_scale), 1, 65535)
            depth = np.where(valid, units * script.depth_scale, 0.0)
        flow_true = None
        flow = None
        if k > 0:
            flow_true = _flow(cam, owners[k - 1], gen_world[k - 1], X[k - 1], X[k],
                              [(L[g][k - 1], L[g][k]) for g in range(len(bodies))])
            flow = flow_true.copy()
            prev_valid = owners[k - 1] >= 0
            ns = script.noise
            for std in (ns.pixel_std, ns.flow_std):
                if std > 0:
                    flow[prev_valid] += nrng.normal(0.0, std, (int(prev_valid.sum()), 2))
            if ns.outlier_fraction > 0:
                vv, uu = np.nonzero(prev_valid)
                pick = nrng.random(len(vv)) < ns.outlier_fraction
                flow[vv[pick], uu[pick]] = flow_true[vv[pick], uu[pick]] + nrng.uniform(-50, 50, (int(pick.sum()), 2))
        frames.append(FrameBundle(k, depth, mask, flow, cam, script.depth_scale))
        internals.append(SimFrame(owner, depth_true[k], gen_world[k], flow_true))
    return Simulation(script, frames, gt, internals, bodies, static)


def _flow(cam, owner_prev, world_prev, X_prev, X_k, motions):
    """Exact displacement of every generating point of frame k-1 into frame k."""
    flow = np.zeros(owner_prev.shape + (2,))
    vs, us = np.nonzero(owner_prev >= 0)
    if len(vs) == 0:
        return flow
    w = world_prev[vs, us]
    own = owner_prev[vs, us]
    moved = w.copy()
    for g, (Lp, Lk) in enumerate(motions, start=1):
        sel = own == g
        if sel.any():
            moved[sel] = (Lk @ Lp.inverse()).apply(w[sel])
    pc = X_k.inverse().apply(moved)
    front = pc[:, 2] > 1e-6
    f = np.full((len(vs), 2), BEHIND_FLOW)
    uv = cam.project_points(pc[front])
    f[front] = uv - np.stack([us[front], vs[front]], 1)
    flow[vs, us] = f
    return flow


def generate(script: SceneScript):
    """``(frames, ground_truth)`` for a script."""
    sim = simulate(script)
    return sim.frames, sim.gt
