# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the kernels in ``dynslam.kernels``; same maths, one pass per point."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline void _huber(double s, double delta, double* w, double* rho) noexcept nogil:
    if s <= delta:
        w[0] = 1.0
        rho[0] = 0.5 * s * s
    else:
        w[0] = delta / s
        rho[0] = delta * (s - 0.5 * delta)


cdef inline void _point(const double[:, ::1] R, const double[::1] t, const double[:, ::1] m,
                        Py_ssize_t i, double fx, double fy, double cx, double cy,
                        double* u, double* v, double* z, double J[2][6]) noexcept nogil:
    cdef double x = R[0, 0] * m[i, 0] + R[0, 1] * m[i, 1] + R[0, 2] * m[i, 2] + t[0]
    cdef double y = R[1, 0] * m[i, 0] + R[1, 1] * m[i, 1] + R[1, 2] * m[i, 2] + t[1]
    cdef double zz = R[2, 0] * m[i, 0] + R[2, 1] * m[i, 1] + R[2, 2] * m[i, 2] + t[2]
    cdef double iz = 1.0 / zz
    cdef double iz2 = iz * iz
    u[0] = fx * x * iz + cx
    v[0] = fy * y * iz + cy
    z[0] = zz
    J[0][0] = fx * iz
    J[0][1] = 0.0
    J[0][2] = -fx * x * iz2
    J[0][3] = -fx * x * y * iz2
    J[0][4] = fx * (1.0 + x * x * iz2)
    J[0][5] = -fx * y * iz
    J[1][0] = 0.0
    J[1][1] = fy * iz
    J[1][2] = -fy * y * iz2
    J[1][3] = -fy * (1.0 + y * y * iz2)
    J[1][4] = fy * x * y * iz2
    J[1][5] = fy * x * iz


def robust_cost(const double[:, ::1] R, const double[::1] t, const double[:, ::1] m,
                const double[:, ::1] base, const double[:, ::1] phi, const double[:, ::1] phi_hat,
                const double[::1] params):
    cdef double fx = params[0], fy = params[1], cx = params[2], cy = params[3]
    cdef double sp = params[4], sf = params[5], delta = params[6]
    cdef bint joint = params[7] != 0.0
    cdef Py_ssize_t n = m.shape[0], i
    cdef double u, v, z, r0, r1, s, w, rho, cost = 0.0
    cdef double J[2][6]
    cdef bint behind = False
    res = np.empty(n, dtype=np.float64)
    cdef double[::1] res_v = res
    with nogil:
        for i in range(n):
            _point(R, t, m, i, fx, fy, cx, cy, &u, &v, &z, J)
            if z <= 1e-6:
                behind = True
            r0 = (base[i, 0] + phi[i, 0] - u) / sp
            r1 = (base[i, 1] + phi[i, 1] - v) / sp
            s = sqrt(r0 * r0 + r1 * r1)
            res_v[i] = s * sp
            _huber(s, delta, &w, &rho)
            cost += rho
            if joint:
                r0 = (phi_hat[i, 0] - phi[i, 0]) / sf
                r1 = (phi_hat[i, 1] - phi[i, 1]) / sf
                _huber(sqrt(r0 * r0 + r1 * r1), delta, &w, &rho)
                cost += rho
    if behind:
        cost = np.inf
    return float(cost), res


def schur_system(const double[:, ::1] R, const double[::1] t, const double[:, ::1] m,
                 const double[:, ::1] base, const double[:, ::1] phi, const double[:, ::1] phi_hat,
                 const double[::1] params, double lam):
    cdef double fx = params[0], fy = params[1], cx = params[2], cy = params[3]
    cdef double sp = params[4], sf = params[5], delta = params[6]
    cdef bint joint = params[7] != 0.0
    cdef Py_ssize_t n = m.shape[0], i, a, b, k
    cdef double u, v, z, rp0, rp1, rf0, rf1, wp, wf, rho, cost = 0.0, hi, c, cp
    cdef double J[2][6]
    cdef double A[6][6]
    cdef double P[6][6]
    cdef double gd[6]
    cdef double q[6]
    S = np.zeros((6, 6), dtype=np.float64)
    rhs = np.zeros(6, dtype=np.float64)
    Bt = np.zeros((n, 2, 6), dtype=np.float64)
    g = np.zeros((n, 2), dtype=np.float64)
    h = np.ones(n, dtype=np.float64)
    cdef double[:, ::1] S_v = S
    cdef double[::1] rhs_v = rhs
    cdef double[:, :, ::1] Bt_v = Bt
    cdef double[:, ::1] g_v = g
    cdef double[::1] h_v = h
    with nogil:
        for a in range(6):
            gd[a] = 0.0
            q[a] = 0.0
            for b in range(6):
                A[a][b] = 0.0
                P[a][b] = 0.0
        for i in range(n):
            _point(R, t, m, i, fx, fy, cx, cy, &u, &v, &z, J)
            for k in range(2):
                for a in range(6):
                    J[k][a] = -J[k][a] / sp
            rp0 = (base[i, 0] + phi[i, 0] - u) / sp
            rp1 = (base[i, 1] + phi[i, 1] - v) / sp
            _huber(sqrt(rp0 * rp0 + rp1 * rp1), delta, &wp, &rho)
            cost += rho
            for a in range(6):
                gd[a] += wp * (J[0][a] * rp0 + J[1][a] * rp1)
                for b in range(a, 6):
                    A[a][b] += wp * (J[0][a] * J[0][b] + J[1][a] * J[1][b])
            if joint:
                rf0 = (phi_hat[i, 0] - phi[i, 0]) / sf
                rf1 = (phi_hat[i, 1] - phi[i, 1]) / sf
                _huber(sqrt(rf0 * rf0 + rf1 * rf1), delta, &wf, &rho)
                cost += rho
                hi = (wp / (sp * sp) + wf / (sf * sf)) * (1.0 + lam)
                h_v[i] = hi
                cp = wp / sp
                g_v[i, 0] = cp * rp0 - (wf / sf) * rf0
                g_v[i, 1] = cp * rp1 - (wf / sf) * rf1
                c = cp * cp / hi
                for a in range(6):
                    Bt_v[i, 0, a] = cp * J[0][a]
                    Bt_v[i, 1, a] = cp * J[1][a]
                    q[a] += (cp * J[0][a] * g_v[i, 0] + cp * J[1][a] * g_v[i, 1]) / hi
                    for b in range(a, 6):
                        P[a][b] += c * (J[0][a] * J[0][b] + J[1][a] * J[1][b])
        for a in range(6):
            for b in range(a, 6):
                S_v[a, b] = A[a][b] - P[a][b]
                S_v[b, a] = S_v[a, b]
            S_v[a, a] += lam * A[a][a]
            rhs_v[a] = -gd[a] + q[a]
    return S, rhs, float(cost), Bt, g, h


def zbuffer(const cnp.int64_t[::1] u, const cnp.int64_t[::1] v, const double[::1] depth,
            Py_ssize_t width, Py_ssize_t height):
    cdef Py_ssize_t n = u.shape[0], i
    out = np.full((height, width), -1, dtype=np.int64)
    best = np.full((height, width), np.inf, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] out_v = out
    cdef double[:, ::1] best_v = best
    with nogil:
        for i in range(n):
            if u[i] < 0 or u[i] >= width or v[i] < 0 or v[i] >= height or not depth[i] > 0:
                continue
            # strict comparison keeps the lowest index among equal depths
            if depth[i] < best_v[v[i], u[i]]:
                best_v[v[i], u[i]] = depth[i]
                out_v[v[i], u[i]] = i
    return out
