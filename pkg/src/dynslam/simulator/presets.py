"""Named scene presets. Distances in metres, twists per frame, image axes x right, y down, z forward."""
from __future__ import annotations

import math

from .scene import Background, NoiseSpec, ObjectSpec, SceneScript, Trajectory

CAR = [1.8, 1.5, 4.2]
CAR_Y = 0.85            # box centre height for a car on the road plane at y = 1.6
CAR_POINTS = 60000


def _car(initial, twist=None, segments=None, count=CAR_POINTS):
    if segments is not None:
        tr = Trajectory(kind="piecewise", initial=list(initial), segments=segments)
    else:
        tr = Trajectory(kind="constant", initial=list(initial), twist=list(twist))
    return ObjectSpec(shape="box", size=list(CAR), count=count, trajectory=tr)


def _street(frames, speed):
    return Background(kind="street", count=120000, extent=[9.0, 1.6, 6.0, -5.0, frames * speed + 100.0])


def driving(seed=0, frames=12, noise=None):
    """KITTI-like: forward camera, one car ahead, one oncoming."""
    return SceneScript(
        seed=seed, frames=frames,
        camera_trajectory=Trajectory(twist=[0.0, 0.0, 1.0, 0.0, 0.004, 0.0]),
        background=_street(frames, 1.0),
        objects=[_car([-3.0, CAR_Y, 15.0, 0, 0, 0], [0.0, 0.0, 1.3, 0.0, 0.01, 0.0]),
                 _car([3.5, CAR_Y, 26.0, 0, math.pi, 0], [0.0, 0.0, 0.4, 0.0, 0.0, 0.0])],
        noise=noise or NoiseSpec())


def swinging_boxes(seed=0, frames=16, noise=None):
    """OMD-like: slowly moving camera in a room, two boxes swinging on pendulums."""
    box = [0.6, 0.6, 0.6]
    return SceneScript(
        seed=seed, frames=frames,
        camera_trajectory=Trajectory(twist=[0.01, 0.0, 0.02, 0.0, 0.002, 0.0]),
        background=Background(kind="room", count=100000, extent=[4.0, 1.5, 4.0, -1.0, 8.0]),
        objects=[ObjectSpec(shape="box", size=box, count=30000, trajectory=Trajectory(
                     kind="swing", pivot=[-1.0, -1.5, 5.0, 0, 0, 0], offset=[0.0, 1.8, 0.0, 0, 0, 0],
                     axis=[0, 0, 1], amplitude=0.5, period=24.0)),
                 ObjectSpec(shape="box", size=box, count=30000, trajectory=Trajectory(
                     kind="swing", pivot=[1.2, -1.5, 6.0, 0, 0, 0], offset=[0.0, 1.8, 0.0, 0, 0, 0],
                     axis=[1, 0, 0], amplitude=0.5, period=30.0))],
        noise=noise or NoiseSpec())


def far_object(seed=0, frames=12, noise=None):
    """A single car 32-37 m ahead, near the object depth gate."""
    return SceneScript(
        seed=seed, frames=frames,
        camera_trajectory=Trajectory(twist=[0.0, 0.0, 0.5, 0.0, 0.0, 0.0]),
        background=_street(frames, 0.5),
        objects=[_car([-2.5, CAR_Y, 34.0, 0, 0, 0], [0.0, 0.0, 0.8, 0.0, 0.0, 0.0])],
        noise=noise or NoiseSpec())


def accelerating(seed=0, frames=16, noise=None):
    """A car ahead that alternates between slow and fast segments."""
    slow, fast = [0.0, 0.0, 0.6, 0.0, 0.0, 0.0], [0.0, 0.0, 1.5, 0.0, 0.0, 0.0]
    return SceneScript(
        seed=seed, frames=frames,
        camera_trajectory=Trajectory(twist=[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        background=_street(frames, 1.0),
        objects=[_car([-3.0, CAR_Y, 14.0, 0, 0, 0],
                      segments=[[3, slow], [3, fast], [3, slow], [3, fast], [3, slow], [3, fast]])],
        noise=noise or NoiseSpec())


def crossing(seed=0, frames=12, noise=None):
    """Three bodies: a car crossing ahead, a car in the next lane and a tumbling sphere."""
    sphere = ObjectSpec(shape="sphere", size=[0.6], count=30000, trajectory=Trajectory(
        initial=[2.5, 1.0, 11.0, 0, 0, 0], twist=[0.05, 0.0, 0.9, 0.1, 0.0, 0.0]))
    return SceneScript(
        seed=seed, frames=frames,
        camera_trajectory=Trajectory(twist=[0.0, 0.0, 1.0, 0.0, -0.003, 0.0]),
        background=_street(frames, 1.0),
        objects=[_car([-7.0, CAR_Y, 24.0, 0, math.pi / 2, 0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
                 _car([-3.0, CAR_Y, 13.0, 0, 0, 0], [0.0, 0.0, 1.2, 0.0, 0.0, 0.0]),
                 sphere],
        noise=noise or NoiseSpec())


def long_follow(seed=0, frames=80, noise=None):
    """Eighty frames following one car at a near-constant gap."""
    return SceneScript(
        seed=seed, frames=frames,
        camera_trajectory=Trajectory(twist=[0.0, 0.0, 0.8, 0.0, 0.0, 0.0]),
        background=_street(frames, 0.8),
        objects=[_car([-3.0, CAR_Y, 12.0, 0, 0, 0], [0.0, 0.0, 0.85, 0.0, 0.0, 0.0])],
        noise=noise or NoiseSpec())


PRESETS = {
    "driving": driving,
    "swinging_boxes": swinging_boxes,
    "far_object": far_object,
    "accelerating": accelerating,
    "crossing": crossing,
    "long_follow": long_follow,
}


def preset(name: str, **kwargs) -> SceneScript:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        from ..errors import ConfigInvalid
        raise ConfigInvalid(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
