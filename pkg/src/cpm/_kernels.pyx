# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SE(3) and nearest-pair kernels. Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, atan2, fabs, round as cround, INFINITY

cnp.import_array()

cdef double SMALL_ANGLE = 1e-8
cdef double NEAR_PI = 1e-2
cdef double PI = 3.141592653589793


cdef inline void _exp_one(const double* xi, double* r, double* t) noexcept nogil:
    cdef double wx = xi[0], wy = xi[1], wz = xi[2]
    cdef double th2 = wx * wx + wy * wy + wz * wz
    cdef double th = sqrt(th2)
    cdef double a, b, c
    if th < SMALL_ANGLE:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
        c = 1.0 / 6.0 - th2 / 120.0
    else:
        a = sin(th) / th
        b = (1.0 - cos(th)) / th2
        c = (th - sin(th)) / (th2 * th)
    # K and K^2 for the skew matrix of omega
    cdef double k[9]
    cdef double k2[9]
    k[0] = 0.0; k[1] = -wz; k[2] = wy
    k[3] = wz; k[4] = 0.0; k[5] = -wx
    k[6] = -wy; k[7] = wx; k[8] = 0.0
    cdef int i, j, m
    cdef double s
    for i in range(3):
        for j in range(3):
            s = 0.0
            for m in range(3):
                s += k[3 * i + m] * k[3 * m + j]
            k2[3 * i + j] = s
    cdef double vm[9]
    for i in range(9):
        r[i] = a * k[i] + b * k2[i]
        vm[i] = b * k[i] + c * k2[i]
    r[0] += 1.0; r[4] += 1.0; r[8] += 1.0
    vm[0] += 1.0; vm[4] += 1.0; vm[8] += 1.0
    for i in range(3):
        t[i] = vm[3 * i] * xi[3] + vm[3 * i + 1] * xi[4] + vm[3 * i + 2] * xi[5]


def se3_exp(xi):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x = np.ascontiguousarray(xi, dtype=np.float64).reshape(-1, 6)
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] rot = np.empty((n, 3, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] trans = np.empty((n, 3))
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            _exp_one(&x[i, 0], &rot[i, 0, 0], &trans[i, 0])
    return rot, trans


cdef inline double _log_rot_one(const double* r, double* w_out) noexcept nogil:
    cdef double wx = r[7] - r[5]
    cdef double wy = r[2] - r[6]
    cdef double wz = r[3] - r[1]
    cdef double cs = (r[0] + r[4] + r[8] - 1.0) / 2.0
    if cs > 1.0:
        cs = 1.0
    elif cs < -1.0:
        cs = -1.0
    cdef double sn = 0.5 * sqrt(wx * wx + wy * wy + wz * wz)
    cdef double th = atan2(sn, cs)
    cdef double f, omc, best, norm
    cdef double sym[9]
    cdef double ax[3]
    cdef int i, j
    if th < SMALL_ANGLE:
        f = 0.5 + th * th / 12.0
        w_out[0] = f * wx; w_out[1] = f * wy; w_out[2] = f * wz
    elif th < PI - NEAR_PI:
        f = th / (2.0 * sin(th))
        w_out[0] = f * wx; w_out[1] = f * wy; w_out[2] = f * wz
    else:
        omc = 1.0 - cs
        for i in range(3):
            for j in range(3):
                sym[3 * i + j] = 0.5 * (r[3 * i + j] + r[3 * j + i])
            sym[4 * i] -= cs
        j = 0
        best = sym[0]
        for i in range(1, 3):
            if sym[4 * i] > best:
                best = sym[4 * i]
                j = i
        f = sqrt(sym[4 * j] * omc)
        for i in range(3):
            ax[i] = sym[3 * i + j] / f
        norm = sqrt(ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2])
        for i in range(3):
            ax[i] /= norm
        if ax[0] * wx + ax[1] * wy + ax[2] * wz < 0.0:
            for i in range(3):
                ax[i] = -ax[i]
        for i in range(3):
            w_out[i] = th * ax[i]
    return th


cdef inline void _vinv_apply(const double* w, const double* t, double* v) noexcept nogil:
    cdef double th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    cdef double th = sqrt(th2)
    cdef double d
    if th < SMALL_ANGLE:
        d = 1.0 / 12.0 + th2 / 720.0
    else:
        d = (1.0 - th * sin(th) / (2.0 * (1.0 - cos(th)))) / th2
    # K t and K (K t)
    cdef double kt0 = w[1] * t[2] - w[2] * t[1]
    cdef double kt1 = w[2] * t[0] - w[0] * t[2]
    cdef double kt2 = w[0] * t[1] - w[1] * t[0]
    cdef double kkt0 = w[1] * kt2 - w[2] * kt1
    cdef double kkt1 = w[2] * kt0 - w[0] * kt2
    cdef double kkt2 = w[0] * kt1 - w[1] * kt0
    v[0] = t[0] - 0.5 * kt0 + d * kkt0
    v[1] = t[1] - 0.5 * kt1 + d * kkt1
    v[2] = t[2] - 0.5 * kt2 + d * kkt2


def se3_log(rot, trans, ref=None):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] r = np.ascontiguousarray(rot, dtype=np.float64).reshape(-1, 3, 3)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] t = np.ascontiguousarray(trans, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = r.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, 6))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] theta = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] rf
    cdef bint use_ref = ref is not None
    if use_ref:
        rf = np.ascontiguousarray(ref, dtype=np.float64).reshape(-1, 3)
    else:
        rf = np.zeros((1, 3))
    cdef Py_ssize_t i
    cdef double th, proj, kk, alt
    cdef double ax[3]
    with nogil:
        for i in range(n):
            th = _log_rot_one(&r[i, 0, 0], &out[i, 0])
            theta[i] = th
            if use_ref and th >= SMALL_ANGLE:
                ax[0] = out[i, 0] / th; ax[1] = out[i, 1] / th; ax[2] = out[i, 2] / th
                proj = ax[0] * rf[i, 0] + ax[1] * rf[i, 1] + ax[2] * rf[i, 2]
                kk = cround((proj - th) / (2.0 * PI))
                if kk != 0.0:
                    alt = th + 2.0 * PI * kk
                    if 1.0 - cos(alt) >= 1e-6:
                        out[i, 0] = alt * ax[0]; out[i, 1] = alt * ax[1]; out[i, 2] = alt * ax[2]
            _vinv_apply(&out[i, 0], &t[i, 0], &out[i, 3])
    return out, theta


def min_pair_distance(a, b, double stop_below=0.0):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pa = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pb = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = pa.shape[0], m = pb.shape[0], i, j
    cdef double best = INFINITY, stop2 = stop_below * stop_below, dx, dy, dz, d2
    with nogil:
        for i in range(n):
            for j in range(m):
                dx = pa[i, 0] - pb[j, 0]
                dy = pa[i, 1] - pb[j, 1]
                dz = pa[i, 2] - pb[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < best:
                    best = d2
            if best < stop2:
                break
    return sqrt(best)
