"""Per-frame tracking: camera pose, object identities and motions, map bookkeeping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..config import RunConfig
from ..dataio import FrameBundle
from ..errors import DegenerateGeometry, TooFewPoints
from ..geometry import CameraModel, Pose, skew
from ..worldmap import GlobalMap, ObjectTrack
from .features import (detect_features, measurements, reanchor, rounded, sample_object_points,
                       track_correspondences)
from .motion import estimate_object_motion_joint, fit_transform, initialize_motion
from .objects import current_points, is_dynamic, propagate_labels

log = logging.getLogger(__name__)

RIGID_MIN_POINTS = 10     # support needed before a shared offset of an object's points is absorbed,
                          # and never below the object's replenishment level
RIGID_AGREEMENT = 0.9     # fraction of those points that must agree once it is removed


@dataclass
class FrameStats:
    frame: int
    static_used: int = 0
    static_inliers: int = 0
    camera_model: str = ""
    camera_failed: bool = False
    objects: dict = field(default_factory=dict)      # label -> dict of counters


class Tracker:
    """Front end. Feed frames in order with :meth:`process`; results accumulate in ``self.map``."""

    def __init__(self, cam: CameraModel, config: RunConfig | None = None):
        self.cam = cam
        self.cfg = config or RunConfig()
        self.noise = self.cfg.noise
        self.map = GlobalMap()
        self.active: list[int] = []
        self.next_label = 1
        self.prev_frame: int | None = None
        self.stats: list[FrameStats] = []

    # ------------------------------------------------------------------ helpers
    def _add_points(self, k, pixels, depth, X_k, label):
        z = measurements(self.cam, pixels, depth)
        w = X_k.apply(z)
        ids = []
        for i in range(len(pixels)):
            p = self.map.new_point(label)
            p.add(k, pixels[i], z[i], w[i])
            ids.append(p.point_id)
        return ids

    def _rng(self, k, label):
        return np.random.default_rng([int(self.cfg.seed), int(k), int(label)])

    def _new_object(self, label, k, j):
        obj = ObjectTrack(label, status="new", first_frame=k, last_seen_frame=k)
        obj.mask_ids[k] = int(j)
        self.map.objects[label] = obj
        return obj

    def _sample(self, k, fb, j, label, occupied):
        pix = sample_object_points(fb.mask == j, fb.depth, self.noise.object_sample_stride,
                                   self.noise.max_object_depth, occupied)
        return self._add_points(k, pix, fb.depth, self.map.cameras[k], label)

    # ------------------------------------------------------------------ frames
    def process(self, fb: FrameBundle) -> FrameStats:
        if self.prev_frame is None:
            st = self._first(fb)
        else:
            st = self._step(fb)
        self.prev_frame = fb.frame_id
        self.stats.append(st)
        return st

    def _first(self, fb: FrameBundle) -> FrameStats:
        k = fb.frame_id
        X = Pose.identity()
        self.map.cameras[k] = X
        assign, self.next_label, _ = propagate_labels(
            {int(j): [] for j in np.unique(fb.mask) if j > 0}, self.next_label)
        active = []
        for j, label in assign.items():
            self._new_object(label, k, j)
            ids = self._sample(k, fb, j, label, None)
            self.map.objects[label].original_samples = len(ids)
            active += ids
        pix = detect_features(fb.depth, fb.mask, None, 0, self.noise.feature_budget,
                              self.noise.feature_min_distance)
        active += self._add_points(k, pix, fb.depth, X, 0)
        self.active = active
        return FrameStats(k, camera_model="identity")

    def _step(self, fb: FrameBundle) -> FrameStats:
        k, kp = fb.frame_id, self.prev_frame
        cfg, noise, cam, gmap = self.cfg, self.noise, self.cam, self.map
        st = FrameStats(k)
        if fb.flow is None:
            raise DegenerateGeometry(f"frame {k} has no flow")
        pts = [gmap.points[i] for i in self.active]
        n = len(pts)
        ids = np.array(self.active, dtype=np.int64)
        labels = np.array([p.label for p in pts], dtype=np.int64)
        q_prev = np.array([p.pixels[-1] for p in pts], dtype=float).reshape(n, 2)
        q_int = q_prev.astype(np.int64)
        m_prev = np.array([p.positions[-1] for p in pts], dtype=float).reshape(n, 3)
        z_prev = np.array([p.measurements[-1][2] for p in pts], dtype=float)
        pred, phi_hat, inb = track_correspondences(q_int, fb.flow)
        h, w = fb.mask.shape
        qk = rounded(pred)
        land = np.full(n, -1, dtype=np.int64)
        land[inb] = fb.mask[qk[inb, 1], qk[inb, 0]]

        # ---- camera
        X_prev = gmap.cameras[kp]
        X_pred = X_prev @ gmap.odometry[kp] if kp in gmap.odometry else X_prev
        sel = np.flatnonzero((labels == 0) & inb)
        st.static_used = len(sel)
        X_k, phi_s, inl_s = X_pred, phi_hat[sel], np.zeros(len(sel), dtype=bool)
        try:
            T0, st.camera_model = initialize_motion(cam, m_prev[sel], pred[sel], X_pred.inverse(),
                                                    noise, self._rng(k, 0))
            fit = fit_transform(cam, m_prev[sel], q_prev[sel], phi_hat[sel], T0, noise, cfg.joint_flow)
            X_k, phi_s, inl_s = fit.T.inverse(), fit.flow, fit.inliers
        except (TooFewPoints, DegenerateGeometry) as exc:
            log.warning("frame %d: camera tracking failed (%s); using constant velocity", k, exc)
            st.camera_failed = True
        st.static_inliers = int(inl_s.sum())
        gmap.cameras[k] = X_k
        gmap.odometry[k] = X_prev.inverse() @ X_k
        X_inv = X_k.inverse()

        # ---- identities
        mask_ids = [int(j) for j in np.unique(fb.mask) if j > 0]
        votes = {j: labels[inb & (land == j)].tolist() for j in mask_ids}
        assign, self.next_label, new_labels = propagate_labels(votes, self.next_label)

        # (indices, sub-pixel targets, allowed raster or None, predicted world points or None,
        #  object motion covariance or None, support needed to absorb a shared offset)
        records = []
        motions = {}     # label -> (H, support ids, mask id)
        s_idx = sel[inl_s]
        records.append((s_idx, q_prev[s_idx] + phi_s[inl_s], fb.mask == 0, m_prev[s_idx], None, 0))

        for j in mask_ids:
            label = assign[j]
            if label in new_labels:
                self._new_object(label, k, j)
                continue
            obj = gmap.objects[label]
            # every in-bounds point of the object takes part; outlying flows are refined or rejected
            own = np.flatnonzero(inb & (labels == label))
            cur, okc = current_points(cam, pred[own], fb.depth, X_k)
            moving = is_dynamic(m_prev[own][okc] - cur[okc], noise.scene_flow_threshold, noise.dynamic_ratio)
            dynamic = moving or obj.status == "dynamic"
            obj.mask_ids[k] = j
            obj.last_seen_frame = k
            obj.missed = 0
            st.objects[label] = {"mask": j, "points": len(own), "dynamic": dynamic}
            if not dynamic:
                obj.status = "static"
                records.append((own, pred[own], fb.mask == j, None, None, 0))
                continue
            obj.status = "dynamic"
            res = self._object_motion(k, label, own[z_prev[own] <= noise.max_object_depth],
                                      m_prev, q_prev, phi_hat, pred, X_k)
            if res is None:
                st.objects[label]["failed"] = True
                continue
            H, o_idx, phi_o, cov = res
            motions[label] = (H, o_idx, j)
            records.append((o_idx, q_prev[o_idx] + phi_o, fb.mask == j, H.apply(m_prev[o_idx]), cov, self._rigid_support(obj)))

        # ---- objects whose mask vanished
        claimed = set(assign.values())
        for label in sorted(set(labels[labels > 0].tolist()) - claimed):
            obj = gmap.objects[label]
            if obj.status != "dynamic" or not cfg.mask_propagation:
                obj.status = "lost" if obj.status == "dynamic" else obj.status
                continue
            obj.missed += 1
            if obj.missed > noise.max_missed_frames:
                obj.status = "lost"
                continue
            own = np.flatnonzero(inb & (labels == label) & (z_prev <= noise.max_object_depth))
            res = self._object_motion(k, label, own, m_prev, q_prev, phi_hat, pred, X_k)
            st.objects[label] = {"mask": 0, "points": len(own), "dynamic": True, "propagated": True}
            if res is None:
                continue
            H, o_idx, phi_o, cov = res
            motions[label] = (H, o_idx, 0)
            obj.mask_ids[k] = 0
            records.append((o_idx, q_prev[o_idx] + phi_o, None, H.apply(m_prev[o_idx]), cov, self._rigid_support(obj)))

        # ---- write records at k (first claim on a pixel wins)
        used = np.zeros((h, w), dtype=bool)
        active = []
        for idx, p_sub, allowed, expected, cov, support in records:
            if len(idx) == 0:
                continue
            exp_z = None if expected is None else (expected @ X_inv.R.T + X_inv.t)[:, 2]
            if cov is not None:
                # an object's motion is weakest along the viewing ray (far objects: ~1 m at 1 px); an offset
                # shared by all its points is absorbed when the fit's own covariance allows it, so the
                # checks below still catch a slide onto another surface
                s_pt = cfg.graph.sigma_point * max(1.0, float(np.median(exp_z)) / cfg.graph.point_depth_scale_from)
                qi = rounded(p_sub).clip(0, [w - 1, h - 1])
                dz = fb.depth[qi[:, 1], qi[:, 0]]
                ok = (dz > 0) if allowed is None else (dz > 0) & allowed[qi[:, 1], qi[:, 0]]
                if ok.sum() >= support:
                    shift = float(np.median(dz[ok] - exp_z[ok]))
                    var_z = (X_inv.R @ cov @ X_inv.R.T)[2, 2]
                    if abs(shift) <= noise.reanchor_gate * np.sqrt(var_z + s_pt ** 2):
                        exp_z = exp_z + shift
            q_new, found = reanchor(p_sub, fb.depth, allowed, exp_z)
            z = measurements(cam, np.clip(q_new, 0, [w - 1, h - 1]), fb.depth)
            wpos = X_k.apply(z)
            if expected is not None:
                # a landing on a different surface point ends the track instead of corrupting it
                gate = noise.reanchor_gate * cfg.graph.sigma_point * np.maximum(1.0, z[:, 2] / cfg.graph.point_depth_scale_from)
                d = wpos - expected
                if cov is not None and found.sum() >= support:
                    c = np.median(d[found], axis=0)
                    # a motion error moves every point alike: after removing it nearly all must agree,
                    # whereas a partial landing on another face (self-occlusion) leaves a split
                    agree = (np.linalg.norm(d - c, axis=1) <= gate)[found].mean()
                    if agree >= RIGID_AGREEMENT and \
                            c @ np.linalg.solve(cov + s_pt ** 2 * np.eye(3), c) <= noise.reanchor_gate ** 2:
                        d = d - c
                found &= np.linalg.norm(d, axis=1) <= gate
            for r in range(len(idx)):
                if not found[r] or used[q_new[r, 1], q_new[r, 0]]:
                    continue
                used[q_new[r, 1], q_new[r, 0]] = True
                p = pts[idx[r]]
                p.add(k, q_new[r], z[r], wpos[r])
                active.append(int(ids[idx[r]]))
        for label, (H, o_idx, j) in motions.items():
            obj = gmap.objects[label]
            obj.motions[k] = H
            obj.point_ids[k] = [int(ids[i]) for i in o_idx]
            st.objects[label]["inliers"] = len(o_idx)

        # ---- replenish object samples and static features
        counts = {}
        for pid in active:
            lab = gmap.points[pid].label
            counts[lab] = counts.get(lab, 0) + 1
        occupied = np.argwhere(used)[:, ::-1]
        for j in mask_ids:
            label = assign[j]
            obj = gmap.objects[label]
            have = counts.get(label, 0)
            if label in new_labels or have < noise.object_replenish_fraction * obj.original_samples:
                new = self._sample(k, fb, j, label, occupied)
                obj.original_samples = have + len(new)
                active += new
        forbid = fb.mask.copy()
        for label, (H, o_idx, j) in motions.items():
            if j == 0:
                # keep static detections off objects whose mask is being propagated
                pix = np.array([gmap.points[ids[i]].pixels[-1] for i in o_idx
                                if gmap.points[ids[i]].last_frame == k], dtype=np.int64).reshape(-1, 2)
                r = noise.object_sample_stride
                for u, v in pix:
                    forbid[max(v - r, 0):v + r + 1, max(u - r, 0):u + r + 1] = 1
        pix = detect_features(fb.depth, forbid, occupied, counts.get(0, 0), noise.feature_budget,
                              noise.feature_min_distance)
        active += self._add_points(k, pix, fb.depth, X_k, 0)
        self.active = active
        return st

    def _rigid_support(self, obj) -> float:
        return max(RIGID_MIN_POINTS, self.noise.object_replenish_fraction * obj.original_samples)

    def _object_motion(self, k, label, own, m_prev, q_prev, phi_hat, pred, X_k):
        """Two-model initialisation then joint refinement; None when the object cannot be estimated."""
        noise, cam = self.noise, self.cam
        if len(own) < max(3, noise.min_object_points):
            return None
        obj = self.map.objects[label]
        prop = obj.motions.get(k - 1, Pose.identity())
        X_inv = X_k.inverse()
        try:
            T0, _ = initialize_motion(cam, m_prev[own], pred[own], X_inv @ prop, noise,
                                      self._rng(k, label), fallback=X_inv)
            H, phi, inl, fit = estimate_object_motion_joint(cam, m_prev[own], q_prev[own], phi_hat[own], X_k,
                                                            X_k @ T0, noise, self.cfg.joint_flow, return_fit=True)
        except (TooFewPoints, DegenerateGeometry) as exc:
            log.info("frame %d: object %d not estimated (%s)", k, label, exc)
            return None
        return H, own[inl], phi[inl], _centroid_covariance(fit, m_prev[own[inl]], X_k)


def _centroid_covariance(fit, points, X_k: Pose):
    """World-frame covariance of the predicted object centroid, from the fit of ``G = X_k^-1 H``."""
    if fit.covariance is None:
        return None
    p = fit.T.apply(np.mean(points, axis=0))
    J = np.hstack([np.eye(3), -skew(p)])
    return X_k.R @ (J @ fit.covariance @ J.T) @ X_k.R.T
