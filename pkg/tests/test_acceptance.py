"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line (printed, and repeated in the
terminal summary). Long runs are cached so criteria that share a run
(3, 4b and 8; 4b, 5 and 8) pay for it once.
"""
import functools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import record, sim_cached
from dynslam.cli import main as cli_main
from dynslam.config import RunConfig
from dynslam.dataio import (GroundTruth, read_depth, read_flow, read_ground_truth, read_intrinsics, read_map,
                            read_mask, read_trajectory, write_depth, write_mask, write_flow, write_ground_truth,
                            write_intrinsics, write_map, write_trajectory)
from dynslam.evaluation import Estimates, associate, object_velocity, pose_change_error, sequence_report
from dynslam.geometry import Pose, exp_se3, log_se3
from dynslam.graph import build_global_graph, optimize, residual
from dynslam.pipeline import run_sequence
from dynslam.simulator import NoiseSpec, delete_masks, ground_truth_map, perturb_map, preset, simulate

HERE = Path(__file__).parent
NOISY = NoiseSpec(pixel_std=1.0, outlier_fraction=0.1)
CONSTANT_VELOCITY = ("driving", "far_object", "crossing", "long_follow")


def _noisy(name, seed=0, frames=None):
    kw = {"seed": seed, "noise": NOISY}
    if frames is not None:
        kw["frames"] = frames
    return simulate(preset(name, **kw))


def _mean_object_rmse_t(rep):
    vals = [o.rmse_t for o in rep.objects.values() if o.frames]
    return float(np.mean(vals)) if vals else float("nan")


@functools.lru_cache(maxsize=None)
def _full_run(name, seed, smooth=True):
    """Noisy full pipeline. Returns (report after batch, report of the tracking-only snapshot, solver reports)."""
    sim = _noisy(name, seed)
    res = run_sequence(sim.frames, sim.cam, RunConfig(seed=seed, smooth_motion=smooth), sim.gt)
    before = sequence_report(res.tracking_estimates, sim.gt)
    solver = list(res.local_reports.values()) + ([res.global_report] if res.global_report else [])
    return res.report, before, solver


DRIVING_SEEDS = range(50)
FAR_SEEDS = range(5)
CROSSING_SEEDS = range(3)
ACCEL_SEEDS = range(5)


# --------------------------------------------------------------------------- 1

def test_criterion_1_geometry_suite():
    t = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(HERE / "test_geometry.py")],
                         capture_output=True, text=True, cwd=HERE.parent)
    dt = time.perf_counter() - t
    ok = out.returncode == 0 and dt < 10.0
    record("1", ok, f"geometry suite rc={out.returncode}, {out.stdout.strip().splitlines()[-1]}, {dt:.1f} s (< 10 s)")
    assert ok, out.stdout[-2000:]


# --------------------------------------------------------------------------- 2

def _pose_diff(a: Pose, b: Pose) -> float:
    return float(np.abs(a.matrix - b.matrix).max())


def test_criterion_2_exactness_at_truth():
    t = time.perf_counter()
    presets = ("driving", "swinging_boxes", "far_object", "accelerating", "crossing", "long_follow")
    worst_cam = worst_obj = worst_res = worst_smooth = 0.0
    missing = []
    for name in presets:
        sim = simulate(preset(name))          # uncached: long_follow alone is ~1 GB of rasters
        cfg = RunConfig(local_ba=False, global_ba=False)
        res = run_sequence(sim.frames, sim.cam, cfg)
        gmap = res.map
        for k, X in sim.gt.camera_poses.items():
            worst_cam = max(worst_cam, _pose_diff(gmap.cameras[k], X))
        est = Estimates.from_map(gmap)
        assoc = associate(est, sim.gt)
        for g in range(1, len(sim.body_clouds) + 1):
            if g not in assoc.values():
                missing.append((name, g))
        for l, g in assoc.items():
            L = sim.gt.object_poses
            for k, H in est.motions[l].items():
                worst_obj = max(worst_obj, _pose_diff(H, L[(k, g)] @ L[(k - 1, g)].inverse()))
        # point measurement, odometry and point motion factors vanish at truth everywhere; the smooth-motion
        # prior vanishes where motion is constant and otherwise equals the scripted change of motion
        g_gt = build_global_graph(ground_truth_map(sim, 300, 100))
        for f in g_gt.factors:
            r = residual(f, g_gt.values)
            if f.kind == "SmoothMotion" and name not in CONSTANT_VELOCITY:
                l, k = f.keys[1][1], f.keys[1][2]
                L = sim.gt.object_poses
                truth = log_se3((L[(k - 1, l)] @ L[(k - 2, l)].inverse()).inverse() @ (L[(k, l)] @ L[(k - 1, l)].inverse()))
                worst_smooth = max(worst_smooth, float(np.abs(r - truth).max()))
            else:
                worst_res = max(worst_res, float(np.abs(r).max()))
    dt = time.perf_counter() - t
    ok = worst_cam < 1e-6 and worst_obj < 1e-6 and worst_res < 1e-10 and worst_smooth < 1e-10 and not missing \
        and dt < 60
    record("2", ok, f"{len(presets)} presets: camera {worst_cam:.1e}, objects {worst_obj:.1e} (< 1e-6); "
                    f"residuals at GT {worst_res:.1e}, smooth residual vs scripted change {worst_smooth:.1e} "
                    f"(< 1e-10); untracked objects {missing}; {dt:.1f} s (< 60 s)")
    assert ok


# --------------------------------------------------------------------------- 3

def test_criterion_3_noise_robustness():
    t = time.perf_counter()
    cam_et, obj_et = [], []
    for s in DRIVING_SEEDS:
        rep, _, _ = _full_run("driving", s)
        cam_et += rep.cam_E_t
        for o in rep.objects.values():
            obj_et += o.E_t
    dt = time.perf_counter() - t
    mc, mo = float(np.median(cam_et)), float(np.median(obj_et))
    ok = mc < 0.05 and mo < 0.15 and dt < 600
    record("3", ok, f"driving, 50 seeds, 1 px + 10% outliers: median camera E_t {mc:.4f} m (< 0.05), "
                    f"median object E_t {mo:.4f} m (< 0.15), {dt:.0f} s (< 600 s)")
    assert ok


def test_batch_refinement_reduces_object_error_in_80_percent_of_runs():
    """Graph-module example: per-object E_t after the batch step lower than tracking-only in >= 80% of 50 runs."""
    wins = total = 0
    for s in DRIVING_SEEDS:
        after, before, _ = _full_run("driving", s)
        for l, o in after.objects.items():
            if l in before.objects and o.frames:
                total += 1
                wins += o.rmse_t < before.objects[l].rmse_t
    frac = wins / total
    record("3b", frac >= 0.8, f"batch step lowers object RMSE E_t in {wins}/{total} = {frac:.0%} object runs (>= 80%)")
    assert frac >= 0.8


# --------------------------------------------------------------------------- 4

def _tracked(sim, joint):
    res = run_sequence(sim.frames, sim.cam, RunConfig(local_ba=False, global_ba=False, joint_flow=joint))
    return res.map.tracked_points(5), len(res.map.points)


def test_criterion_4a_joint_flow_keeps_more_tracks():
    """Verdict on the stated count. The share of created points that reach 5 frames is printed alongside:
    replenishment re-seeds short-lived tracks, so the raw count also grows with churn."""
    rows, ok = [], True
    for name in ("driving", "swinging_boxes", "far_object", "accelerating", "crossing", "long_follow"):
        sim = _noisy(name)
        (j, nj), (m, nm) = _tracked(sim, True), _tracked(sim, False)
        rows.append(f"{name} {j}/{m} ({j / nj:.0%}/{m / nm:.0%} of created)")
        ok &= j >= m
    record("4a", ok, "points tracked >= 5 frames, joint/motion-only: " + ", ".join(rows))
    assert ok


def test_criterion_4b_batch_optimisation_direction():
    rows, ok = [], True
    for name, seeds in (("driving", DRIVING_SEEDS), ("crossing", CROSSING_SEEDS), ("long_follow", (0,)),
                        ("far_object", FAR_SEEDS)):
        on = float(np.mean([_mean_object_rmse_t(_full_run(name, s)[0]) for s in seeds]))
        off = float(np.mean([_mean_object_rmse_t(_full_run(name, s)[1]) for s in seeds]))
        good = on <= off * (0.9 if name == "far_object" else 1.0)
        ok &= good
        rows.append(f"{name} {off:.4f}->{on:.4f} ({(off - on) / off:+.0%})")
    record("4b", ok, "mean object E_t tracking-only -> batch (far_object needs >= 10% drop): " + ", ".join(rows))
    assert ok


def test_criterion_4c_smooth_motion_on_accelerating_object():
    on = float(np.mean([_mean_object_rmse_t(_full_run("accelerating", s, True)[0]) for s in ACCEL_SEEDS]))
    off = float(np.mean([_mean_object_rmse_t(_full_run("accelerating", s, False)[0]) for s in ACCEL_SEEDS]))
    ok = off <= on
    record("4c", ok, f"accelerating, {len(ACCEL_SEEDS)} seeds: mean object E_t smooth on {on:.4f}, off {off:.4f} "
                     f"(off must not be worse)")
    assert ok


# --------------------------------------------------------------------------- 5

@functools.lru_cache(maxsize=None)
def _masked_run():
    """Only the small results are kept: (frames, deleted frames, car labels, car motion frames, car closed, report, solver)."""
    sim = _noisy("long_follow")
    frames, deleted = delete_masks(sim.frames, 0.4, seed=0, gt=sim.gt, gt_id=1, max_run=5)
    res = run_sequence(frames, sim.cam, RunConfig(), sim.gt)
    est = Estimates.from_map(res.map)
    labels = tuple(l for l, g in associate(est, sim.gt).items() if g == 1)
    motion_frames = tuple(sorted(est.motions[labels[0]])) if labels else ()
    closed = bool(labels) and res.map.objects[labels[0]].closed
    solver = list(res.local_reports.values()) + ([res.global_report] if res.global_report else [])
    return len(res.map.cameras), deleted, labels, motion_frames, closed, res.report, solver


def test_criterion_5_mask_failure_robustness():
    n, deleted, labels, motion_frames, closed, report, _ = _masked_run()
    base, _, _ = _full_run("long_follow", 0)
    unbroken = len(labels) == 1 and list(motion_frames) == list(range(1, n)) and not closed
    es_masked = report.objects[labels[0]].mean_abs_es if labels else float("inf")
    es_base = [o for o in base.objects.values() if o.gt_id == 1][0].mean_abs_es
    ok = unbroken and es_masked <= 2 * es_base
    record("5", ok, f"long_follow, {len(deleted)}/{n} masks deleted (runs <= 5): labels for the car {list(labels)}, "
                    f"motions in every frame {unbroken}; mean |E_s| {es_masked:.3f} vs unmasked {es_base:.3f} km/h "
                    f"(<= 2x)")
    assert ok


# --------------------------------------------------------------------------- 6

def _quat_error(T_gt, T_est):
    q = (Rotation.from_matrix(T_est.R).inv() * Rotation.from_matrix(T_gt.R)).as_quat()
    ang = 2 * math.atan2(np.linalg.norm(q[:3]), abs(q[3]))
    return float(np.linalg.norm(T_est.R.T @ (T_gt.t - T_est.t))), math.degrees(ang)


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    worst_t = worst_r = worst_v = 0.0
    for _ in range(1000):
        a = exp_se3(np.concatenate([rng.uniform(-5, 5, 3), rng.uniform(-1.8, 1.8, 3)]))
        b = exp_se3(np.concatenate([rng.uniform(-5, 5, 3), rng.uniform(-1.8, 1.8, 3)]))
        e = pose_change_error(a, b)
        t, r = _quat_error(a, b)
        worst_t, worst_r = max(worst_t, abs(e.E_t - t)), max(worst_r, abs(e.E_r - r))
        pts = rng.normal(size=(rng.integers(1, 200), 3)) * 3 + rng.uniform(-20, 20, 3)
        fd = np.mean([a.apply(p) - p for p in pts], axis=0)      # per-point displacement, averaged
        worst_v = max(worst_v, float(np.abs(object_velocity(a, pts) - fd).max()))
    ok = max(worst_t, worst_r, worst_v) < 1e-9
    record("6", ok, f"1000 cases: |E_t - oracle| {worst_t:.1e}, |E_r - quaternion oracle| {worst_r:.1e} deg, "
                    f"|v - finite-difference| {worst_v:.1e} (< 1e-9)")
    assert ok


# --------------------------------------------------------------------------- 7

def _tree(d: Path):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_7_determinism_and_round_trips(tmp_path):
    checks = {}
    # fixed-seed simulate + run, twice each
    trees = []
    for i in range(2):
        seq = tmp_path / f"seq{i}"
        cli_main(["simulate", "--preset", "crossing", "--seed", "7", "--frames", "6", "--pixel_std", "1",
                  "--outlier_fraction", "0.1", "--output", str(seq)])
        trees.append(_tree(seq))
    checks["simulate"] = trees[0] == trees[1]
    seq = tmp_path / "seq0"
    out = tmp_path / "run"
    runs = []
    for _ in range(2):
        cli_main(["run", "--input", str(seq), "--output", str(out)])
        runs.append(_tree(out))
    checks["run"] = runs[0] == runs[1] and len(runs[0]) > 5

    rng = np.random.default_rng(7)
    d = tmp_path / "rt"
    d.mkdir()
    depth = rng.integers(0, 65536, (30, 40)) / 256.0
    write_depth(d / "d.bin", depth)
    checks["depth"] = np.array_equal(read_depth(d / "d.bin")[0], depth)
    mask = rng.integers(0, 50, (30, 40))
    write_mask(d / "m.bin", mask)
    checks["mask"] = np.array_equal(read_mask(d / "m.bin"), mask)
    flow = rng.normal(size=(30, 40, 2)) * 20
    write_flow(d / "f64.bin", flow)
    write_flow(d / "f32.bin", flow.astype(np.float32), precision=32)
    checks["flow"] = np.array_equal(read_flow(d / "f64.bin"), flow) and \
        np.array_equal(read_flow(d / "f32.bin"), flow.astype(np.float32).astype(np.float64))
    cam = sim_cached("driving", frames=2).cam
    write_intrinsics(d / "cam.txt", cam)
    checks["intrinsics"] = read_intrinsics(d / "cam.txt") == cam
    gt = GroundTruth()
    for k in range(10):
        gt.camera_poses[k] = exp_se3(rng.normal(size=6))
        gt.object_poses[(k, 1)] = exp_se3(rng.normal(size=6))
        gt.mask_to_gt[(k, 3)] = 1
    write_ground_truth(d, gt)
    back = read_ground_truth(d)
    checks["ground truth"] = all(np.array_equal(back.camera_poses[k].matrix, gt.camera_poses[k].matrix)
                                 for k in gt.camera_poses) and back.mask_to_gt == gt.mask_to_gt and \
        all(np.array_equal(back.object_poses[key].matrix, P.matrix) for key, P in gt.object_poses.items())
    poses = {k: exp_se3(rng.normal(size=6) * 2) for k in range(500)}
    for fmt in ("kitti", "tum"):
        write_trajectory(poses, d / f"a.{fmt}", fmt)
        write_trajectory(read_trajectory(d / f"a.{fmt}", fmt), d / f"b.{fmt}", fmt)
        checks[f"trajectory {fmt}"] = (d / f"a.{fmt}").read_bytes() == (d / f"b.{fmt}").read_bytes()
    gmap = read_map(out / "map.txt")
    write_map(gmap, d / "map.txt")
    checks["map"] = (d / "map.txt").read_bytes() == (out / "map.txt").read_bytes()
    ok = all(checks.values())
    record("7", ok, "byte-identical reruns and bit-exact round trips: "
                    + ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion_8_solver_contract():
    reports = []
    for s in DRIVING_SEEDS:
        reports += _full_run("driving", s)[2]
    for name, seeds in (("crossing", CROSSING_SEEDS), ("far_object", FAR_SEEDS), ("long_follow", (0,))):
        for s in seeds:
            reports += _full_run(name, s)[2]
    for s in ACCEL_SEEDS:
        reports += _full_run("accelerating", s, True)[2] + _full_run("accelerating", s, False)[2]
    reports += _masked_run()[-1]
    mono = sum(r.monotone() for r in reports)
    worst_err, worst_it, recovered = 0.0, 0, 0
    for seed in range(20):
        sim = simulate(preset("driving", seed=seed, frames=8))
        gmap = ground_truth_map(sim, 200, 80, seed=seed)
        ref = build_global_graph(gmap).values
        vals, rep = optimize(build_global_graph(perturb_map(gmap, 0.01, seed)))
        err = max(_pose_diff(v, ref[k]) if isinstance(v, Pose) else float(np.abs(v - ref[k]).max())
                  for k, v in vals.items())
        worst_err, worst_it = max(worst_err, err), max(worst_it, rep.iterations)
        recovered += err < 1e-5 and rep.iterations <= 50 and rep.monotone()
        reports.append(rep)
    ok = mono == len(reports) - 20 and recovered == 20
    record("8", ok, f"monotone cost on {mono}/{len(reports) - 20} acceptance solver runs; perturbed-GT recovery "
                    f"{recovered}/20 seeds, worst error {worst_err:.1e} (< 1e-5), worst iterations {worst_it} (<= 50)")
    assert ok
