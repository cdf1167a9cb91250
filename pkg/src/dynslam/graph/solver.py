"""Huber-robust Levenberg-Marquardt over a :class:`FactorGraph`.

Point factors are evaluated in batches; the few pose factors one by one.
The normal equations are assembled sparse. Point variables are grouped
into clusters (a static point alone, or an object point's chain of
per-frame variables linked by motion factors) and eliminated with a Schur
complement, leaving a dense system over the pose variables. Poses are
retracted on the left, points additively.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg, splu
from scipy.stats import chi2

from ..config import GraphConfig
from ..errors import NotConverged, SingularNormalEquations
from ..geometry import Pose, exp_se3
from . import factors as F
from .build import FactorGraph

log = logging.getLogger(__name__)

COST_FLOOR = 1e-20
STEP_TOL = 1e-12
EXACT_SCHUR_FLOPS = 2e9     # above this the reduced system is solved iteratively
PCG_TOL = 1e-6
PCG_MAX_ITERATIONS = 500
DENSE_COUPLING = 4_000_000     # pose x point entries below which the coupling block is dense


@dataclass
class SolverReport:
    iterations: int = 0                 # accepted steps
    attempts: int = 0                   # linear solves, accepted or not
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    rms: dict = field(default_factory=dict)         # factor kind -> RMS of raw residual norms
    history: list = field(default_factory=list)     # robust cost after each accepted step, initial first
    skipped: bool = False

    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.history, self.history[1:]))


def huber_threshold(dof: int) -> float:
    return math.sqrt(chi2.ppf(0.95, dof))


class _Problem:
    """Flattened view of a graph: pose and point arrays, column offsets and factor batches."""

    def __init__(self, graph: FactorGraph, robust: bool):
        self.graph = graph
        self.robust = robust
        self.pose_keys = [k for k in graph.values if F.is_pose_key(k)]
        self.point_keys = [k for k in graph.values if not F.is_pose_key(k)]
        self.pose_idx = {k: i for i, k in enumerate(self.pose_keys)}
        self.point_idx = {k: i for i, k in enumerate(self.point_keys)}
        off = 0
        self.pose_col = np.full(len(self.pose_keys), -1, dtype=np.int64)
        for i, k in enumerate(self.pose_keys):
            if k not in graph.fixed:
                self.pose_col[i] = off
                off += 6
        self.n_pose = off
        self.point_col = np.full(len(self.point_keys), -1, dtype=np.int64)
        self.clusters = self._clusters(graph)
        for members in self.clusters:
            for i in members:
                self.point_col[i] = off
                off += 3
        self.n = off
        self.exact = None
        self.plan = None
        self.R = np.array([graph.values[k].R for k in self.pose_keys]).reshape(-1, 3, 3)
        self.t = np.array([graph.values[k].t for k in self.pose_keys]).reshape(-1, 3)
        self.M = np.array([graph.values[k] for k in self.point_keys], dtype=float).reshape(-1, 3)

        pm = [f for f in graph.factors if f.kind == "PointMeasurement"]
        self.pm_cam = np.array([self.pose_idx[f.keys[0]] for f in pm], dtype=np.int64)
        self.pm_pt = np.array([self.point_idx[f.keys[1]] for f in pm], dtype=np.int64)
        self.pm_z = np.array([f.measurement for f in pm], dtype=float).reshape(-1, 3)
        self.pm_w = np.array([1.0 / f.sigma for f in pm]).reshape(-1, 3)
        mo = [f for f in graph.factors if f.kind == "PointMotion"]
        self.mo_a = np.array([self.point_idx[f.keys[0]] for f in mo], dtype=np.int64)
        self.mo_b = np.array([self.point_idx[f.keys[1]] for f in mo], dtype=np.int64)
        self.mo_h = np.array([self.pose_idx[f.keys[2]] for f in mo], dtype=np.int64)
        self.mo_w = np.array([1.0 / f.sigma for f in mo]).reshape(-1, 3)
        self.small = [f for f in graph.factors if f.kind in ("Odometry", "SmoothMotion", "PriorPose")]
        self.delta3 = huber_threshold(3)
        self.delta6 = huber_threshold(6)

    def _clusters(self, graph):
        """Free point variables grouped through point-to-point factors, sorted by size."""
        parent = list(range(len(self.point_keys)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in graph.factors:
            pts = [self.point_idx[k] for k in f.keys if k in self.point_idx and k not in graph.fixed]
            for a, b in zip(pts[:-1], pts[1:]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        groups = {}
        for i, k in enumerate(self.point_keys):
            if k not in graph.fixed:
                groups.setdefault(find(i), []).append(i)
        return sorted(groups.values(), key=lambda m: (len(m), m[0]))

    # ------------------------------------------------------------------ state
    def state(self):
        return self.R.copy(), self.t.copy(), self.M.copy()

    def values(self, state) -> dict:
        R, t, M = state
        out = {}
        for i, k in enumerate(self.pose_keys):
            out[k] = Pose(R[i], t[i])
        for i, k in enumerate(self.point_keys):
            out[k] = M[i].copy()
        return out

    def retract(self, state, dx):
        R, t, M = state
        R, t, M = R.copy(), t.copy(), M.copy()
        for i in np.flatnonzero(self.pose_col >= 0):
            c = self.pose_col[i]
            P = exp_se3(dx[c:c + 6]) @ Pose(R[i], t[i])
            R[i], t[i] = P.R, P.t
        free = self.point_col >= 0
        cols = self.point_col[free]
        M[free] += dx[cols[:, None] + np.arange(3)]
        return R, t, M

    # ------------------------------------------------------------------ evaluation
    def _robust(self, s, delta):
        """Huber cost and IRLS weight of whitened residual norms."""
        if not self.robust:
            return 0.5 * s * s, np.ones_like(s)
        quad = s <= delta
        cost = np.where(quad, 0.5 * s * s, delta * (s - 0.5 * delta))
        w = np.where(quad, 1.0, delta / np.maximum(s, 1e-300))
        return cost, w

    def evaluate(self, state, jacobians=True):
        """Robust cost, per-kind raw residual norms and (optionally) whitened weighted blocks.

        Blocks are ``(residual rows, [(col offsets (n,), J (n, d, c))...])`` per group.
        """
        R, t, M = state
        cost = 0.0
        norms = {}
        groups = []
        if len(self.pm_cam):
            c = self.pm_cam
            r, JX, Jm = F.point_measurement_batch(R[c], t[c], M[self.pm_pt], self.pm_z)
            rw = r * self.pm_w
            s = np.linalg.norm(rw, axis=1)
            cst, w = self._robust(s, self.delta3)
            cost += float(cst.sum())
            norms["PointMeasurement"] = np.linalg.norm(r, axis=1)
            if jacobians:
                sw = np.sqrt(w)[:, None]
                W = (self.pm_w * sw)[:, :, None]
                groups.append((rw * sw, [(self.pose_col[c], W * JX), (self.point_col[self.pm_pt], W * Jm)]))
        if len(self.mo_a):
            h = self.mo_h
            r, Ja, Jb, JH = F.point_motion_batch(R[h], t[h], M[self.mo_a], M[self.mo_b])
            rw = r * self.mo_w
            s = np.linalg.norm(rw, axis=1)
            cst, w = self._robust(s, self.delta3)
            cost += float(cst.sum())
            norms["PointMotion"] = np.linalg.norm(r, axis=1)
            if jacobians:
                sw = np.sqrt(w)[:, None]
                W = (self.mo_w * sw)[:, :, None]
                groups.append((rw * sw, [(self.point_col[self.mo_a], W * Ja), (self.point_col[self.mo_b], W * Jb),
                                         (self.pose_col[h], W * JH)]))
        for f in self.small:
            vals = {k: Pose(R[self.pose_idx[k]], t[self.pose_idx[k]]) for k in f.keys}
            r, Js = F.evaluate(f, vals)
            rw = r / f.sigma
            s = float(np.linalg.norm(rw))
            if f.kind == "PriorPose":
                cst, w = 0.5 * s * s, 1.0
            else:
                cst, w = self._robust(np.array([s]), self.delta6)
                cst, w = float(cst[0]), float(w[0])
            cost += cst
            norms.setdefault(f.kind, []).append(float(np.linalg.norm(r)))
            if jacobians:
                sw = math.sqrt(w)
                Wf = (sw / f.sigma)[:, None]
                blocks = [(self.pose_col[[self.pose_idx[k]]], (Wf * J)[None]) for k, J in zip(f.keys, Js)]
                groups.append(((rw * sw)[None], blocks))
        return cost, norms, groups

    def normal_equations(self, groups) -> "_Normal":
        """Gauss-Newton blocks ``J^T J`` and ``J^T r`` scattered into the partitioned system.

        The sparsity pattern never changes between iterations, so the scatter
        indices are worked out on the first call and reused.
        """
        if self.plan is None:
            self.plan = _Plan(self, groups)
        P = self.plan
        g_v, cc_v, cp_v, pp_v = [], [], [], []
        out = {"cc": cc_v, "cp": cp_v, "pp": pp_v}
        for (r, blocks), gsel, pairs in zip(groups, P.g_sel, P.pairs):
            for (ca, Ja), sel in zip(blocks, gsel):
                if sel is None:
                    continue
                J = Ja if sel is True else Ja[sel]
                g_v.append(np.einsum("nia,ni->na", J, r if sel is True else r[sel]).ravel())
            for ia, ib, sel, dest in pairs:
                A_, B_ = blocks[ia][1], blocks[ib][1]
                if sel is not True:
                    A_, B_ = A_[sel], B_[sel]
                out[dest].append(np.matmul(A_.transpose(0, 2, 1), B_).ravel())
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
        g = np.bincount(P.g_idx, cat(g_v), minlength=self.n)
        nc, npp = self.n_pose, self.n - self.n_pose
        Hcc = np.bincount(P.cc_idx, cat(cc_v), minlength=nc * nc).reshape(nc, nc)
        wv = np.bincount(P.cp_inv, cat(cp_v), minlength=len(P.cp_u))
        if P.dense_w:
            W = np.zeros(nc * npp)
            W[P.cp_u] = wv
            W = W.reshape(nc, npp)
        else:
            W = sp.csr_matrix((wv, P.cp_cols, P.cp_ptr), shape=(nc, npp))
        pv = np.bincount(P.pp_inv, cat(pp_v), minlength=len(P.pp_u))
        return _Normal(Hcc, W, pv, g)


def _unique_csr(lin, ncols, nrows):
    """Unique linear indices with the CSR arrays of their pattern."""
    u, inv = np.unique(lin, return_inverse=True)
    rows, cols = u // ncols, u % ncols
    ptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=nrows))])
    return u, inv.ravel(), rows, cols, ptr


class _Plan:
    """Scatter pattern of the normal equations and of the point-block inverse."""

    def __init__(self, prob, groups):
        nc, npp = prob.n_pose, prob.n - prob.n_pose
        g_i, cc_i, cp_i, pp_i = [], [], [], []
        self.g_sel, self.pairs = [], []
        for r, blocks in groups:
            gsel = []
            for ca, Ja in blocks:
                ka = ca >= 0
                if not ka.any():
                    gsel.append(None)
                    continue
                sel = True if ka.all() else np.flatnonzero(ka)
                gsel.append(sel)
                g_i.append((ca[ka, None] + np.arange(Ja.shape[2])).ravel())
            pairs = []
            for ia, (ca, Ja) in enumerate(blocks):
                da = Ja.shape[2]
                for ib, (cb, Jb) in enumerate(blocks):
                    db = Jb.shape[2]
                    if da == 3 and db == 6:
                        continue            # lower pose-point triangle is implied by symmetry
                    k = (ca >= 0) & (cb >= 0)
                    if not k.any():
                        continue
                    shape = (int(k.sum()), da, db)
                    R = np.broadcast_to(ca[k, None, None] + np.arange(da)[None, :, None], shape).ravel()
                    C = np.broadcast_to(cb[k, None, None] + np.arange(db)[None, None, :], shape).ravel()
                    if da == 6 and db == 6:
                        dest = "cc"
                        cc_i.append(R * nc + C)
                    elif da == 6:
                        dest = "cp"
                        cp_i.append(R * npp + (C - nc))
                    else:
                        dest = "pp"
                        pp_i.append((R - nc) * npp + (C - nc))
                    pairs.append((ia, ib, True if k.all() else np.flatnonzero(k), dest))
            self.g_sel.append(gsel)
            self.pairs.append(pairs)
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
        self.g_idx, self.cc_idx = cat(g_i), cat(cc_i)
        self.dense_w = nc * npp <= DENSE_COUPLING
        self.cp_u, self.cp_inv, self.cp_rows, self.cp_cols, self.cp_ptr = _unique_csr(cat(cp_i), max(npp, 1), nc)
        self.pp_u, self.pp_inv, self.pp_r, self.pp_c, self.pp_ptr = _unique_csr(cat(pp_i), max(npp, 1), npp)
        diag = self.pp_r == self.pp_c
        if np.count_nonzero(diag) != npp:
            raise SingularNormalEquations(f"{npp - np.count_nonzero(diag)} unconstrained point parameters")
        self.pp_diag = np.flatnonzero(diag)
        self._block_plan(prob.clusters, npp)

    def _block_plan(self, clusters, n):
        sizes = np.array([3 * len(m) for m in clusters], dtype=np.int64)
        start = np.concatenate([[0], np.cumsum(sizes)])
        owner = np.repeat(np.arange(len(sizes)), sizes)
        self.blocks = []
        o = owner[self.pp_r] if n else np.zeros(0, dtype=np.int64)
        for size in np.unique(sizes):
            ids = np.flatnonzero(sizes == size)
            local = np.full(len(sizes), -1, dtype=np.int64)
            local[ids] = np.arange(len(ids))
            sel = np.flatnonzero(local[o] >= 0)
            oo = o[sel]
            flat = (local[oo] * size + (self.pp_r[sel] - start[oo])) * size + (self.pp_c[sel] - start[oo])
            self.blocks.append((int(size), len(ids), sel, flat))
        # clusters are sorted by size, so concatenated row-major block inverses are in CSR order
        row_len = np.repeat(sizes, sizes)
        self.inv_ptr = np.concatenate([[0], np.cumsum(row_len)])
        self.inv_cols = np.concatenate([np.tile(np.arange(s0, s0 + z), z) for s0, z in zip(start[:-1], sizes)]) \
            if len(sizes) else np.zeros(0, dtype=np.int64)
        self.n_points = n
        self.sizes = sizes


@dataclass
class _Normal:
    Hcc: np.ndarray          # pose-pose, dense
    W: object               # pose-point coupling, dense array or CSR
    pp_v: np.ndarray         # point-point values on the plan's pattern (block diagonal per cluster)
    g: np.ndarray


def _schur_cost(P: _Plan, nc: int) -> float:
    """Rough flop count of forming the reduced pose system exactly."""
    if P.dense_w or nc == 0 or P.n_points == 0:
        return 0.0
    owner = np.repeat(np.arange(len(P.sizes)), P.sizes)
    pairs = np.unique(owner[P.cp_cols].astype(np.int64) * nc + P.cp_rows)
    rows = np.bincount(pairs // nc, minlength=len(P.sizes))
    return float(np.sum(rows.astype(float) ** 2 * P.sizes))


def _solve(prob, N: _Normal, lam):
    """Damped step ``(H + lam diag(H)) dx = -g`` by Schur elimination of the point clusters.

    The reduced pose system is formed and factorised exactly when that is
    cheap. Long object-point chains make it dense and costly; then it is
    solved by conjugate gradients applied implicitly, preconditioned with
    the pose block.
    """
    P = prob.plan
    nc, npp = prob.n_pose, prob.n - prob.n_pose
    dc_ = np.diag(N.Hcc).copy()
    dp_ = N.pp_v[P.pp_diag]
    if np.any(dc_ <= 0) or np.any(dp_ <= 0):
        raise SingularNormalEquations(f"{int(np.sum(dc_ <= 0) + np.sum(dp_ <= 0))} unconstrained parameters")
    pv = N.pp_v.copy()
    pv[P.pp_diag] += lam * dp_
    gc, gp = N.g[:nc], N.g[nc:]
    if prob.exact is None:
        prob.exact = _schur_cost(P, nc) <= EXACT_SCHUR_FLOPS
    if not prob.exact:
        dx = _solve_iterative(P, N, lam, dc_, pv, nc, npp)
    else:
        Hinv = _block_inverse(P, pv)
        if nc:
            S = N.Hcc + np.diag(lam * dc_)
            if isinstance(N.W, np.ndarray):
                Y = (Hinv @ N.W.T).T
                S = S - Y @ N.W.T
            else:
                Y = (N.W @ Hinv).tocsr()
                S = S - (Y @ N.W.T).toarray()
            b = -gc + Y @ gp
            dc = sla.cho_solve(_cholesky(S), b)
            dp = Hinv @ (-gp - N.W.T @ dc)
        else:
            dc = np.zeros(0)
            dp = Hinv @ (-gp)
        dx = np.concatenate([dc, dp])
    if not np.all(np.isfinite(dx)):
        raise SingularNormalEquations("non-finite increment")
    return dx


def _cholesky(S):
    try:
        return sla.cho_factor(0.5 * (S + S.T))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularNormalEquations(f"reduced pose system: {exc}") from None


def _solve_iterative(P: _Plan, N: _Normal, lam, dc_, pv, nc, npp):
    gc, gp = N.g[:nc], N.g[nc:]
    App = sp.csr_matrix((pv, P.pp_c, P.pp_ptr), shape=(npp, npp)).tocsc()
    try:
        # clusters are contiguous and chains ordered in time, so the natural order keeps the factor banded
        lu = splu(App, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SingularNormalEquations(f"point system: {exc}") from None
    W = sp.csr_matrix(N.W)
    Wt = W.T.tocsr()
    Scc = N.Hcc + np.diag(lam * dc_)
    cf = _cholesky(Scc)
    op = LinearOperator((nc, nc), matvec=lambda v: Scc @ v - W @ lu.solve(Wt @ v), dtype=float)
    pre = LinearOperator((nc, nc), matvec=lambda v: sla.cho_solve(cf, v), dtype=float)
    b = -gc + W @ lu.solve(gp)
    dc, info = cg(op, b, M=pre, rtol=PCG_TOL, maxiter=PCG_MAX_ITERATIONS)
    if info < 0:
        raise SingularNormalEquations("conjugate gradients broke down")
    dp = lu.solve(-gp - Wt @ dc)
    return np.concatenate([dc, dp])


def _block_inverse(P: _Plan, pv):
    """Inverse of the block-diagonal point system, batched over clusters of equal size."""
    n = P.n_points
    if n == 0:
        return sp.csr_matrix((0, 0))
    data = []
    for size, count, sel, flat in P.blocks:
        blk = np.bincount(flat, pv[sel], minlength=count * size * size).reshape(count, size, size)
        try:
            data.append(np.linalg.inv(blk).ravel())
        except np.linalg.LinAlgError:
            raise SingularNormalEquations("singular point block") from None
    return sp.csr_matrix((np.concatenate(data), P.inv_cols, P.inv_ptr), shape=(n, n))


def optimize(graph: FactorGraph, cfg: GraphConfig | None = None, max_iterations: int | None = None,
             robust: bool | None = None, strict: bool = False, rel_tol: float | None = None):
    """Minimise the robust cost of ``graph``; returns ``(values, report)``.

    Steps that do not lower the cost are rejected and the damping raised.
    With ``strict`` a run that exhausts its iteration budget raises
    :class:`NotConverged` carrying the report (values are still returned in
    ``exc.report.values``).
    """
    cfg = cfg or GraphConfig()
    robust = cfg.robust if robust is None else robust
    max_it = cfg.lm_max_iterations if max_iterations is None else max_iterations
    rel_tol = cfg.lm_rel_tol if rel_tol is None else rel_tol
    prob = _Problem(graph, robust)
    state = prob.state()
    cost, norms, groups = prob.evaluate(state)
    rep = SolverReport(initial_cost=cost, history=[cost])
    lam = cfg.lm_lambda0
    H = None
    while prob.n and rep.attempts < max_it:
        if cost <= COST_FLOOR:
            rep.converged = True
            break
        if H is None:
            H = prob.normal_equations(groups)
            if not np.any(H.g):
                rep.converged = True
                break
        dx = _solve(prob, H, lam)
        rep.attempts += 1
        trial = prob.retract(state, dx)
        new_cost, new_norms, new_groups = prob.evaluate(trial)
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            state, cost, norms, groups = trial, new_cost, new_norms, new_groups
            rep.iterations += 1
            rep.history.append(cost)
            lam = max(lam * cfg.lm_lambda_down, 1e-15)
            H = None
            if rel < rel_tol or np.max(np.abs(dx)) < STEP_TOL:
                rep.converged = True
                break
        else:
            lam *= cfg.lm_lambda_up
            if lam > 1e16:
                # no descent left at machine precision
                rep.converged = True
                break
    if not prob.n:
        rep.converged = True
    rep.final_cost = cost
    rep.rms = {k: float(np.sqrt(np.mean(np.square(v)))) for k, v in norms.items() if len(v)}
    values = prob.values(state)
    if not rep.converged:
        log.info("optimizer stopped after %d attempts with cost %.6g", rep.attempts, cost)
        if strict:
            rep.values = values
            raise NotConverged(f"no convergence in {max_it} iterations", rep)
    return values, rep
