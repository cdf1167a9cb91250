import functools

import numpy as np
import pytest

from dynslam.geometry import CameraModel, Pose, exp_se3
from dynslam.simulator import NoiseSpec, preset, simulate


@functools.lru_cache(maxsize=6)
def sim_cached(name: str, seed: int = 0, noisy: bool = False, frames: int | None = None):
    """Simulations are deterministic, so one copy per argument set is shared across tests."""
    kw = {"seed": seed}
    if noisy:
        kw["noise"] = NoiseSpec(pixel_std=1.0, outlier_fraction=0.1)
    if frames is not None:
        kw["frames"] = frames
    return simulate(preset(name, **kw))


@pytest.fixture
def cam():
    return CameraModel(100.0, 100.0, 50.0, 50.0, 101, 101)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, trans=2.0, rot=1.0) -> Pose:
    return exp_se3(np.concatenate([rng.uniform(-trans, trans, 3), rng.uniform(-rot, rot, 3)]))


# --------------------------------------------------------------------------- acceptance report

ACCEPTANCE: dict = {}      # criterion -> (passed, detail)


def record(criterion: str, passed: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  {detail}")
