import numpy as np
import pytest

from dynslam.config import NoiseConfig, RunConfig
from dynslam.errors import TooFewPoints
from dynslam.evaluation import pose_change_error
from dynslam.geometry import Pose, exp_se3
from dynslam.kernels import _pc_and_jac, robust_cost
from dynslam.simulator import NoiseSpec, delete_masks, preset, simulate
from dynslam.tracking import (Tracker, classify_objects, detect_features, estimate_camera_pose_joint,
                              estimate_object_motion_joint, initialize_motion, kabsch, majority_label, p3p,
                              propagate_labels, propagate_mask, reanchor, sample_object_points, scene_flow,
                              track_correspondence)
from dynslam.tracking.objects import is_dynamic
from dynslam.tracking.p3p import bearings

from conftest import random_pose, sim_cached

NOISE = NoiseConfig()


def _correspondences(sim, k, owner_id=0, n=400, seed=0, flow=None):
    """World points at k-1, their integer pixels and flows into k for one body."""
    it = sim.internals
    own = it[k - 1].owner
    v, u = np.nonzero(own == owner_id)
    fl = it[k].flow_true if flow is None else flow
    phi = fl[v, u]
    tgt = np.stack([u, v], 1) + phi
    ok = (np.abs(phi).max(1) < 1e5) & (tgt[:, 0] > 0) & (tgt[:, 0] < sim.cam.width - 1) \
        & (tgt[:, 1] > 0) & (tgt[:, 1] < sim.cam.height - 1)
    idx = np.flatnonzero(ok)
    idx = np.random.default_rng(seed).choice(idx, size=min(n, len(idx)), replace=False)
    return it[k - 1].points_world[v[idx], u[idx]], np.stack([u[idx], v[idx]], 1).astype(float), phi[idx]


# --------------------------------------------------------------------------- features

def test_no_features_under_full_mask():
    depth = np.full((50, 60), 5.0)
    assert len(detect_features(depth, np.ones((50, 60), dtype=np.int32))) == 0


def test_no_detection_above_budget():
    rng = np.random.default_rng(0)
    depth = rng.uniform(1, 10, (50, 60))
    assert len(detect_features(depth, np.zeros((50, 60)), inlier_count=1500)) == 0
    assert len(detect_features(depth, np.zeros((50, 60)), inlier_count=1100)) == 100


def test_checkerboard_corner_census():
    sq, n = 10, 10
    img = ((np.indices((sq * n, sq * n)) // sq).sum(0) % 2).astype(float) + 1.0
    census = (n - 1) ** 2                 # interior corners of the board
    got = detect_features(img, np.zeros(img.shape), budget=10_000, min_distance=sq // 2, quality=0.3)
    assert abs(len(got) - census) <= 0.2 * census
    # every detection sits near a true corner
    near = np.abs(((got + 0.5) / sq) - np.rint((got + 0.5) / sq)) * sq
    assert np.all(near.max(1) <= 2)


def test_track_correspondence_examples():
    flow = np.zeros((20, 20, 2))
    assert np.array_equal(track_correspondence((10, 10), flow), [10, 10])
    flow[10, 10] = (2, -1)
    assert np.array_equal(track_correspondence((10, 10), flow), [12, 9])
    flow[10, 10] = (15, 0)
    assert track_correspondence((10, 10), flow) is None
    depth = np.ones((20, 20))
    depth[9, 12] = 0
    flow[10, 10] = (2, -1)
    assert track_correspondence((10, 10), flow, depth) is None


def test_predicted_pixels_match_projected_truth():
    sim = sim_cached("driving")
    gt, cam = sim.gt, sim.cam
    for k in (1, 5):
        m, q, phi = _correspondences(sim, k)
        pred = np.array([track_correspondence(p, sim.frames[k].flow) for p in q.astype(int)])
        proj = cam.project_points(gt.camera_poses[k].inverse().apply(m))
        assert np.abs(pred - proj).max() < 1e-9


def test_sample_object_points_examples():
    mask = np.zeros((20, 20), dtype=bool)
    assert len(sample_object_points(mask)) == 0
    mask[3:12, 6:15] = True
    assert len(sample_object_points(mask, stride=3)) == 9
    depth = np.ones((20, 20))
    depth[6, 9] = 0
    pix = sample_object_points(mask, depth, 3)
    assert len(pix) == 8 and not any((p == [9, 6]).all() for p in pix)


def test_reanchor_prefers_nearest_valid_pixel():
    depth = np.ones((10, 10))
    depth[4, 4] = 0
    q, ok = reanchor(np.array([[4.2, 4.1], [8.0, 8.0]]), depth, expected_depth=np.array([1.0, 5.0]))
    assert ok[0] and not ok[1]
    assert tuple(q[0]) in {(5, 4), (4, 5), (3, 4), (4, 3)} and tuple(q[0]) == (5, 4)


# --------------------------------------------------------------------------- camera

def test_camera_pose_exact_from_truth():
    sim = sim_cached("driving")
    m, q, phi = _correspondences(sim, 3)
    X = sim.gt.camera_poses[3]
    T = X.inverse()
    cost, res = robust_cost(T.R, T.t, m, q, phi, phi, (*[sim.cam.fx, sim.cam.fy, sim.cam.cx, sim.cam.cy],
                                                        1.0, 3.0, 1.345, 1.0))
    assert cost < 1e-18 and res.max() < 1e-9
    est, _, inl = estimate_camera_pose_joint(sim.cam, m, q, phi, X, NOISE)
    assert np.abs(est.matrix - X.matrix).max() < 1e-8 and inl.all()


@pytest.mark.parametrize("seed", range(20))
def test_camera_pose_from_previous_pose(seed):
    sim = sim_cached("driving", seed=seed, frames=3)
    m, q, phi = _correspondences(sim, 2, seed=seed)
    est, _, _ = estimate_camera_pose_joint(sim.cam, m, q, phi, sim.gt.camera_poses[1], NOISE)
    assert np.abs(est.matrix - sim.gt.camera_poses[2].matrix).max() < 1e-6


def test_huber_suppresses_outliers():
    script = preset("driving", frames=3, noise=NoiseSpec(pixel_std=1.0))
    sim = simulate(script)
    m, q, phi = _correspondences(sim, 2, n=600, flow=sim.frames[2].flow)
    X = sim.gt.camera_poses[2]
    init = sim.gt.camera_poses[1]

    def err(phi_in):
        est, _, _ = estimate_camera_pose_joint(sim.cam, m, q, phi_in, init, NOISE)
        return pose_change_error(X, est).E_t

    clean = err(phi)
    bad = phi.copy()
    rng = np.random.default_rng(1)
    idx = rng.choice(len(bad), size=int(0.3 * len(bad)), replace=False)
    bad[idx] += rng.uniform(-50, 50, (len(idx), 2))
    assert err(bad) < 5 * clean


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        estimate_camera_pose_joint(sim_cached("driving").cam, np.ones((2, 3)), np.ones((2, 2)), np.zeros((2, 2)),
                                   Pose.identity(), NOISE)


def test_projection_jacobian_finite_difference():
    rng = np.random.default_rng(2)
    fx, fy, cx, cy = 500.0, 480.0, 320.0, 120.0
    for _ in range(100):
        T = random_pose(rng, 0.5, 0.3)
        m = rng.normal(size=(1, 3)) + [0, 0, 8]
        _, _, J = _pc_and_jac(T.R, T.t, m, fx, fy, cx, cy)
        num = np.zeros((2, 6))
        h = 1e-6
        for j in range(6):
            d = np.zeros(6)
            d[j] = h
            a = _pc_and_jac(*(lambda P: (P.R, P.t))(exp_se3(d) @ T), m, fx, fy, cx, cy)[0]
            b = _pc_and_jac(*(lambda P: (P.R, P.t))(exp_se3(-d) @ T), m, fx, fy, cx, cy)[0]
            num[:, j] = (a - b)[0] / (2 * h)
        assert np.abs(num - J[0]).max() / max(1.0, np.abs(num).max()) < 1e-4


# --------------------------------------------------------------------------- objects

def _object_case(name="driving", k=4, g=1, seed=0, noisy=False, n=400):
    sim = sim_cached(name, seed=seed) if not noisy else simulate(
        preset(name, seed=seed, frames=k + 1, noise=NoiseSpec(pixel_std=1.0)))
    m, q, phi = _correspondences(sim, k, owner_id=g, n=n, seed=seed, flow=sim.frames[k].flow)
    gt = sim.gt
    H = gt.object_poses[(k, g)] @ gt.object_poses[(k - 1, g)].inverse()
    H_prev = gt.object_poses[(k - 1, g)] @ gt.object_poses[(k - 2, g)].inverse()
    return sim, m, q, phi, gt.camera_poses[k], H, H_prev


def test_object_motion_noiseless():
    sim, m, q, phi, X, H, H_prev = _object_case()
    est, _, inl = estimate_object_motion_joint(sim.cam, m, q, phi, X, H_prev, NOISE)
    assert np.abs(est.matrix - H.matrix).max() < 1e-6 and inl.all()


def test_static_object_gives_identity_motion():
    sim = sim_cached("driving")
    m, q, phi = _correspondences(sim, 4, owner_id=0)
    H, _, _ = estimate_object_motion_joint(sim.cam, m, q, phi, sim.gt.camera_poses[4],
                                           Pose.from_translation([0.2, 0, 0.3]), NOISE)
    assert np.linalg.norm(np.log(np.diag(H.R)).real) < 1e-4 and np.linalg.norm(H.t) < 1e-4


def test_object_motion_under_pixel_noise_50_seeds():
    errs = []
    for seed in range(50):
        sim, m, q, phi, X, H, H_prev = _object_case(k=2, seed=seed, noisy=True, n=500)
        assert len(m) == 500
        est, _, _ = estimate_object_motion_joint(sim.cam, m, q, phi, X, H_prev, NOISE)
        errs.append(pose_change_error(H, est).E_t)
    # Monte-Carlo bound on the RMS; single draws on this near-planar rear view reach ~0.06
    assert np.sqrt(np.mean(np.square(errs))) < 0.05


def test_initialize_motion_models():
    sim, m, q, phi, X, H, H_prev = _object_case()
    obs = q + phi
    rng = np.random.default_rng(0)
    T, model = initialize_motion(sim.cam, m, obs, X.inverse() @ H_prev, NOISE, rng)
    assert model == "propagated"
    assert np.abs(T.matrix - (X.inverse() @ H).matrix).max() < 1e-9
    # a stopped object suddenly moving: the propagated (identity) model misses, P3P finds it
    T, model = initialize_motion(sim.cam, m, obs, X.inverse(), NOISE, rng)
    assert model == "p3p"
    assert np.abs(T.matrix - (X.inverse() @ H).matrix).max() < 1e-6
    T, model = initialize_motion(sim.cam, m[:3], obs[:3], X.inverse(), NOISE, rng)
    assert model == "propagated"


def test_p3p_and_kabsch_recover_truth():
    rng = np.random.default_rng(3)
    cam = sim_cached("driving").cam
    for _ in range(50):
        T = random_pose(rng, 0.5, 0.5)
        pts = rng.uniform([-3, -2, 6], [3, 2, 15], (3, 3))
        pts_obj = T.inverse().apply(pts)
        sols = p3p(pts_obj, bearings(cam, cam.project_points(pts)))
        assert min(np.abs(S.matrix - T.matrix).max() for S in sols) < 1e-7
        A = rng.normal(size=(10, 3))
        assert kabsch(A, T.apply(A)).allclose(T, 1e-10)


def test_classification_rules():
    assert classify_objects({1: np.zeros((10, 3))}) == {1: "static"}
    f = np.zeros((10, 3))
    f[:3, 0] = 0.5
    assert not is_dynamic(f)                         # exactly 30% dynamic stays static
    f[:4, 0] = 0.5
    assert is_dynamic(f)
    assert not is_dynamic(np.tile([0.12, 0, 0], (10, 1)))   # exactly at the threshold
    assert not is_dynamic(np.zeros((0, 3)))
    sim = sim_cached("driving")
    gt = sim.gt
    g = 1
    L0, L1 = gt.object_poses[(3, g)], gt.object_poses[(4, g)]
    pts = L0.apply(sim.body_clouds[0][:200])
    assert np.linalg.norm(scene_flow(pts, (L1 @ L0.inverse()).apply(pts)), axis=1).min() > 0.12
    assert classify_objects({2: scene_flow(pts, (L1 @ L0.inverse()).apply(pts))}) == {2: "dynamic"}


def test_label_propagation_examples():
    lab, nxt, new = propagate_labels({1: [3] * 10}, 4)
    assert lab == {1: 3} and not new
    lab, nxt, new = propagate_labels({1: [0] * 10}, 4)
    assert lab == {1: 4} and new == {4} and nxt == 5
    lab, _, _ = propagate_labels({1: [2] * 6 + [5] * 4}, 6)
    assert lab == {1: 2}
    assert majority_label([5, 5, 2, 2]) == 2 and majority_label([]) == 0 and majority_label([0, 0, 3]) == 0


def test_propagate_mask_advects_pixels():
    flow = np.zeros((10, 10, 2))
    flow[..., 0] = 1.5
    pred, phi, ok = propagate_mask(np.array([[2, 3], [9, 3]]), flow)
    assert np.array_equal(pred[0], [3.5, 3]) and ok.tolist() == [True, False]


# --------------------------------------------------------------------------- tracker

def _track(frames, cam, **kw):
    cfg = RunConfig(local_ba=False, global_ba=False, **kw)
    tr = Tracker(cam, cfg)
    for fb in frames:
        tr.process(fb)
    return tr


def test_labels_partition_masks():
    sim = sim_cached("crossing")
    tr = _track(sim.frames, sim.cam)
    for k in range(len(sim.frames)):
        ids = [o.mask_ids[k] for o in tr.map.objects.values() if o.mask_ids.get(k, 0) > 0]
        assert len(ids) == len(set(ids))
    for p in tr.map.points.values():
        assert p.label == 0 or p.label in tr.map.objects


def test_static_scene_flow_zero_under_true_pose():
    sim = sim_cached("driving")
    worst = 0.0
    for k in range(1, len(sim.frames)):
        m, q, phi = _correspondences(sim, k, n=2000, seed=k)
        X = sim.gt.camera_poses[k]
        z = X.inverse().apply(m)[:, 2]                 # depth of the corresponding point at k
        m_k = X.apply(sim.cam.backproject_points(q + phi, z))
        worst = max(worst, np.abs(scene_flow(m, m_k)).max())
    assert worst < 1e-9


def test_single_deleted_mask_keeps_track():
    sim = sim_cached("driving")
    full = _track(sim.frames, sim.cam).map
    frames, deleted = delete_masks(sim.frames, 1 / 12, seed=3, gt=sim.gt, gt_id=1)
    gmap = _track(frames, sim.cam).map
    (k,) = deleted
    lab = [l for l, o in gmap.objects.items() if o.mask_ids and
           sim.gt.mask_to_gt.get((min(o.mask_ids), o.mask_ids[min(o.mask_ids)])) == 1][0]
    obj = gmap.objects[lab]
    assert k in obj.motions and obj.mask_ids[k] == 0 and not obj.closed
    L = sim.gt.object_poses
    Hk = L[(k, 1)] @ L[(k - 1, 1)].inverse()
    e_masked = pose_change_error(Hk, obj.motions[k]).E_t
    assert e_masked < 1e-6
    assert len(obj.motions) == len(full.objects[lab].motions)


def test_object_track_closed_after_long_absence():
    sim = sim_cached("driving")
    frames = list(sim.frames[:3])
    for fb in sim.frames[3:]:
        frames.append(type(fb)(fb.frame_id, fb.depth, np.zeros_like(fb.mask), fb.flow, fb.cam, fb.depth_scale))
    gmap = _track(frames, sim.cam).map
    assert any(o.closed for o in gmap.objects.values())
    for o in gmap.objects.values():
        assert max(o.motions, default=0) <= 2 + NOISE.max_missed_frames
