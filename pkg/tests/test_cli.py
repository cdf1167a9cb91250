import itertools
import json
import math

import numpy as np
import pytest
import yaml

from dynslam.cli import main
from dynslam.config import RunConfig, config_from_dict, load_config
from dynslam.dataio import read_ground_truth, read_map, write_map
from dynslam.geometry import Pose
from dynslam.pipeline import run_sequence
from dynslam.worldmap import GlobalMap, ObjectTrack

from conftest import sim_cached


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq")
    assert main(["simulate", "--preset", "driving", "--frames", "5", "--pixel_std", "0.5",
                 "--output", str(d)]) == 0
    return d


def _tree(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_simulate_is_byte_identical(seq_dir, tmp_path):
    assert main(["simulate", "--preset", "driving", "--frames", "5", "--pixel_std", "0.5",
                 "--output", str(tmp_path)]) == 0
    assert _tree(seq_dir) == _tree(tmp_path)
    scene = yaml.safe_load((seq_dir / "scene.yaml").read_text())
    assert scene["frames"] == 5 and scene["noise"]["pixel_std"] == 0.5


def test_simulate_from_scene_file(tmp_path):
    scene = sim_cached("swinging_boxes").script.to_dict()
    scene["frames"] = 3
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(scene))
    assert main(["simulate", "--scene", str(tmp_path / "s.yaml"), "--output", str(tmp_path / "o")]) == 0
    assert len(list((tmp_path / "o" / "depth").iterdir())) == 3


def test_run_writes_artifacts_and_is_deterministic(seq_dir, tmp_path, capsys):
    out = tmp_path / "run"
    trees = []
    for _ in range(2):      # identical config, output path included
        assert main(["run", "--input", str(seq_dir), "--output", str(out)]) == 0
        trees.append(_tree(out))
    assert "camera  frames=4" in capsys.readouterr().out
    a = trees[0]
    assert a == trees[1]
    outs = [out]
    for name in ("camera_trajectory.txt", "camera_trajectory_tum.txt", "map.txt", "config.yaml",
                 "report/report.json", "report/summary.txt"):
        assert name in a
    obj = [n for n in a if n.startswith("objects/object_")]
    assert obj
    line = a[obj[0]].decode().splitlines()[0].split()
    assert len(line) == 14 and math.isfinite(float(line[-1]))
    rep = json.loads(a["report/report.json"])
    assert rep["camera"]["rmse_t"] < 0.05
    assert load_config(outs[0] / "config.yaml").input == str(seq_dir)
    assert len(a["camera_trajectory.txt"].decode().splitlines()) == 5


def test_flag_overrides_mirror_config_names(seq_dir, tmp_path):
    cfgfile = tmp_path / "c.yaml"
    cfgfile.write_text(yaml.safe_dump({"window_size": 7, "noise": {"sigma_p": 2.0}}))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfgfile), "--input", str(seq_dir), "--output", str(out),
                 "--global_ba", "false", "--noise.sigma_phi", "4", "--graph.sigma_point", "0.07"]) == 0
    cfg = load_config(out / "config.yaml")
    assert (cfg.window_size, cfg.global_ba, cfg.noise.sigma_p, cfg.noise.sigma_phi, cfg.graph.sigma_point) == \
        (7, False, 2.0, 4.0, 0.07)


@pytest.mark.parametrize("argv,code", [
    (["run", "--input", "/nonexistent", "--output", "/tmp/x"], 3),
    (["run", "--output", "/tmp/x"], 2),
    (["run", "--input", ".", "--output", "/tmp/x", "--window_size", "-1"], 2),
    (["run", "--input", ".", "--output", "/tmp/x", "--noise.bogus", "1"], 2),
    (["simulate", "--preset", "nope", "--output", "/tmp/x"], 2),
    (["simulate", "--output", "/tmp/x"], 2),
    (["eval", "--est", "/nonexistent", "--gt", "/nonexistent"], 3),
    (["dump-graph", "--map", "/nonexistent"], 3),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert capsys.readouterr().err


def test_strict_nonconvergence_exits_4(seq_dir, tmp_path):
    assert main(["run", "--input", str(seq_dir), "--output", str(tmp_path), "--strict",
                 "--graph.lm_max_iterations", "1"]) == 4


def test_dump_graph(seq_dir, tmp_path, capsys):
    out = tmp_path / "r"
    main(["run", "--input", str(seq_dir), "--output", str(out), "--global_ba", "false"])
    capsys.readouterr()
    assert main(["dump-graph", "--map", str(out / "map.txt"), "--out", str(tmp_path / "g.txt")]) == 0
    lines = (tmp_path / "g.txt").read_text().splitlines()
    kinds = {l.split(" | ")[0] for l in lines}
    assert {"PriorPose", "Odometry", "PointMeasurement"} <= kinds
    assert main(["dump-graph", "--map", str(out / "map.txt")]) == 0
    assert capsys.readouterr().out.splitlines() == lines


def _gt_estimate(gt, cam_offsets=None):
    """Map holding ground truth itself, optionally with camera translation offsets."""
    gmap = GlobalMap()
    for k, X in gt.camera_poses.items():
        gmap.cameras[k] = X @ Pose.from_translation((cam_offsets or {}).get(k, [0, 0, 0]))
    for (k, j), g in gt.mask_to_gt.items():
        obj = gmap.objects.setdefault(g, ObjectTrack(g))
        obj.mask_ids[k] = j
        if (k - 1, g) in gt.object_poses:
            obj.motions[k] = gt.object_poses[(k, g)] @ gt.object_poses[(k - 1, g)].inverse()
    return gmap


def test_eval_zero_error_and_known_offset(seq_dir, tmp_path, capsys):
    gt = read_ground_truth(seq_dir)
    (tmp_path / "a").mkdir()
    write_map(_gt_estimate(gt), tmp_path / "a" / "map.txt")
    assert main(["eval", "--est", str(tmp_path / "a"), "--gt", str(seq_dir), "--output", str(tmp_path / "ra")]) == 0
    rep = json.loads((tmp_path / "ra" / "report.json").read_text())
    assert rep["camera"]["rmse_t"] < 1e-12
    assert all(o["rmse_t"] < 1e-9 and o["track_ratio"] == 1.0 for o in rep["objects"])
    (tmp_path / "b").mkdir()
    write_map(_gt_estimate(gt, {2: [0.3, 0, 0.4]}), tmp_path / "b" / "map.txt")
    main(["eval", "--est", str(tmp_path / "b"), "--gt", str(seq_dir), "--output", str(tmp_path / "rb")])
    rows = (tmp_path / "rb" / "camera_errors.csv").read_text().splitlines()[1:]
    et = [float(r.split(",")[1]) for r in rows]
    np.testing.assert_allclose(et, [0, 0.5, 0.5, 0], atol=1e-12)


def test_eval_five_run_median(seq_dir, tmp_path, capsys):
    gt = read_ground_truth(seq_dir)
    offsets = [0.4, 0.1, 0.5, 0.2, 0.3]
    dirs = []
    for i, o in enumerate(offsets):
        d = tmp_path / f"e{i}"
        d.mkdir()
        write_map(_gt_estimate(gt, {2: [o, 0, 0]}), d / "map.txt")
        dirs.append(str(d))
    capsys.readouterr()
    assert main(["eval", "--est", *dirs, "--gt", str(seq_dir), "--output", str(tmp_path / "med")]) == 0
    med = json.loads(capsys.readouterr().out)
    # per-run camera RMSE is o * sqrt(2/4) (two of four pose changes are off by o); median offset 0.3
    assert med["runs"] == 5
    assert med["camera"]["rmse_t"] == pytest.approx(0.3 * math.sqrt(0.5), abs=1e-12)
    assert (tmp_path / "med" / "median.json").exists() and (tmp_path / "med" / "run_4" / "report.json").exists()


def test_every_toggle_combination_runs():
    sim = sim_cached("crossing", frames=4)
    names = ("local_ba", "global_ba", "joint_flow", "smooth_motion", "mask_propagation")
    for combo in itertools.product((False, True), repeat=len(names)):
        cfg = config_from_dict(dict(zip(names, combo)))
        res = run_sequence(sim.frames, sim.cam, cfg, sim.gt)
        assert res.report is not None and len(res.map.cameras) == 4
