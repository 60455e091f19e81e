# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; see ``_pykernels`` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, INFINITY

cnp.import_array()

cdef double _EPS = 1e-12


cdef inline void _project(double cx, double cy, double h, double hl, double hw,
                          double ax, double ay, double* lo, double* hi):
    cdef double c = cos(h), s = sin(h)
    cdef double centre = cx * ax + cy * ay
    cdef double r = fabs(hl * (c * ax + s * ay)) + fabs(hw * (-s * ax + c * ay))
    lo[0] = centre - r
    hi[0] = centre + r


def obb_overlap(a, b):
    cdef double acx = a[0], acy = a[1], ah = a[2], ahl = a[3], ahw = a[4]
    cdef double bcx = b[0], bcy = b[1], bh = b[2], bhl = b[3], bhw = b[4]
    cdef double axes[8]
    cdef double alo, ahi, blo, bhi
    cdef int i
    axes[0] = cos(ah); axes[1] = sin(ah)
    axes[2] = -sin(ah); axes[3] = cos(ah)
    axes[4] = cos(bh); axes[5] = sin(bh)
    axes[6] = -sin(bh); axes[7] = cos(bh)
    for i in range(4):
        _project(acx, acy, ah, ahl, ahw, axes[2 * i], axes[2 * i + 1], &alo, &ahi)
        _project(bcx, bcy, bh, bhl, bhw, axes[2 * i], axes[2 * i + 1], &blo, &bhi)
        if alo >= bhi - _EPS or blo >= ahi - _EPS:
            return False
    return True


def raycast_obbs(double ox, double oy, angles, boxes, double max_range):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ang = np.ascontiguousarray(angles, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 5)
    cdef Py_ssize_t n = ang.shape[0], m = bx.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.full(n, INFINITY)
    cdef double dx, dy, c, s, px, py, rdx, rdy, tmin, tmax, t1, t2, best
    cdef double p, d, half
    cdef int k, ok
    for i in range(n):
        dx = cos(ang[i])
        dy = sin(ang[i])
        best = INFINITY
        for j in range(m):
            c = cos(bx[j, 2])
            s = sin(bx[j, 2])
            px = (ox - bx[j, 0]) * c + (oy - bx[j, 1]) * s
            py = -(ox - bx[j, 0]) * s + (oy - bx[j, 1]) * c
            rdx = dx * c + dy * s
            rdy = -dx * s + dy * c
            tmin = 0.0
            tmax = INFINITY
            ok = 1
            for k in range(2):
                if k == 0:
                    p = px; d = rdx; half = bx[j, 3]
                else:
                    p = py; d = rdy; half = bx[j, 4]
                if fabs(d) < _EPS:
                    if fabs(p) > half:
                        ok = 0
                        break
                    continue
                t1 = (-half - p) / d
                t2 = (half - p) / d
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            if ok and tmin <= tmax and tmax >= 0.0 and tmin < best:
                best = tmin
        if best <= max_range:
            out[i] = best
    return out


def segment_hits_rects(double x0, double y0, double x1, double y1, rects):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] r = np.ascontiguousarray(rects, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t m = r.shape[0], j
    cdef double dx = x1 - x0, dy = y1 - y0
    cdef double t0, t1, a, b, p, d, lo, hi
    cdef int k, blocked
    for j in range(m):
        t0 = 0.0
        t1 = 1.0
        blocked = 1
        for k in range(2):
            if k == 0:
                p = x0; d = dx; lo = r[j, 0]; hi = r[j, 2]
            else:
                p = y0; d = dy; lo = r[j, 1]; hi = r[j, 3]
            if fabs(d) < _EPS:
                if p <= lo or p >= hi:
                    blocked = 0
                    break
                continue
            a = (lo - p) / d
            b = (hi - p) / d
            if a > b:
                a, b = b, a
            if a > t0:
                t0 = a
            if b < t1:
                t1 = b
            if t0 >= t1:
                blocked = 0
                break
        if blocked:
            return True
    return False


def points_in_rect(points, rect):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t n = pts.shape[0], i
    cdef double x0 = rect[0], y0 = rect[1], x1 = rect[2], y1 = rect[3]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1, cast=True] out = np.zeros(n, dtype=bool)
    for i in range(n):
        out[i] = x0 <= pts[i, 0] <= x1 and y0 <= pts[i, 1] <= y1
    return out


def project_polyline(double x, double y, cnp.ndarray[cnp.float64_t, ndim=2] pts,
                     cnp.ndarray[cnp.float64_t, ndim=1] cum):
    """Closest point on a polyline: (arc length, distance, segment index)."""
    cdef Py_ssize_t n = pts.shape[0], i, best_i = 0
    cdef double dx, dy, L2, t, qx, qy, d2, best = INFINITY, best_t = 0.0
    for i in range(n - 1):
        dx = pts[i + 1, 0] - pts[i, 0]
        dy = pts[i + 1, 1] - pts[i, 1]
        L2 = dx * dx + dy * dy
        t = ((x - pts[i, 0]) * dx + (y - pts[i, 1]) * dy) / L2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = pts[i, 0] + t * dx - x
        qy = pts[i, 1] + t * dy - y
        d2 = qx * qx + qy * qy
        if d2 < best:
            best = d2
            best_i = i
            best_t = t
    return cum[best_i] + best_t * (cum[best_i + 1] - cum[best_i]), best ** 0.5, best_i
