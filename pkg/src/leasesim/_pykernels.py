"""Pure-Python geometry kernels.

Reference implementations of the routines in ``_ckernels.pyx``.  Both modules
expose the same functions with the same signatures; ``leasesim.kernels``
picks one at import time.

Boxes are oriented rectangles packed as ``(cx, cy, heading, half_length,
half_width)`` rows; axis-aligned rectangles are ``(x0, y0, x1, y1)`` rows.
"""

import math

import numpy as np

_EPS = 1e-12


def _axes(h):
    c, s = math.cos(h), math.sin(h)
    return (c, s), (-s, c)


def _corners(cx, cy, h, hl, hw):
    (ux, uy), (vx, vy) = _axes(h)
    return [
        (cx + ux * hl * sx + vx * hw * sy, cy + uy * hl * sx + vy * hw * sy)
        for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1))
    ]


def obb_overlap(a, b):
    """True if two oriented boxes have overlapping interiors (separating axis test)."""
    ca = _corners(*a)
    cb = _corners(*b)
    for h in (a[2], b[2]):
        for ax, ay in _axes(h):
            pa = [x * ax + y * ay for x, y in ca]
            pb = [x * ax + y * ay for x, y in cb]
            if min(pa) >= max(pb) - _EPS or min(pb) >= max(pa) - _EPS:
                return False
    return True


def raycast_obbs(ox, oy, angles, boxes, max_range):
    """Distance along each ray to the nearest box, ``inf`` when nothing is hit
    within ``max_range``.  ``angles`` are radians in the world frame."""
    angles = np.asarray(angles, dtype=float)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    out = np.full(angles.shape, np.inf)
    dx = np.cos(angles)
    dy = np.sin(angles)
    for cx, cy, h, hl, hw in boxes:
        c, s = math.cos(h), math.sin(h)
        # ray expressed in the box frame
        px = (ox - cx) * c + (oy - cy) * s
        py = -(ox - cx) * s + (oy - cy) * c
        rdx = dx * c + dy * s
        rdy = -dx * s + dy * c
        tmin = np.zeros_like(angles)
        tmax = np.full(angles.shape, np.inf)
        ok = np.ones(angles.shape, dtype=bool)
        for p, d, half in ((px, rdx, hl), (py, rdy, hw)):
            small = np.abs(d) < _EPS
            ok &= ~(small & (abs(p) > half))
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                t1 = (-half - p) / d
                t2 = (half - p) / d
            lo = np.where(small, -np.inf, np.minimum(t1, t2))
            hi = np.where(small, np.inf, np.maximum(t1, t2))
            tmin = np.maximum(tmin, lo)
            tmax = np.minimum(tmax, hi)
        hit = ok & (tmin <= tmax) & (tmax >= 0.0)
        out = np.where(hit & (tmin < out), tmin, out)
    out[out > max_range] = np.inf
    return out


def segment_hits_rects(x0, y0, x1, y1, rects):
    """True if the segment from (x0, y0) to (x1, y1) passes through the
    interior of any axis-aligned rectangle."""
    dx = x1 - x0
    dy = y1 - y0
    for rx0, ry0, rx1, ry1 in np.asarray(rects, dtype=float).reshape(-1, 4):
        t0, t1 = 0.0, 1.0
        blocked = True
        for p, d, lo, hi in ((x0, dx, rx0, rx1), (y0, dy, ry0, ry1)):
            if abs(d) < _EPS:
                if p <= lo or p >= hi:
                    blocked = False
                    break
                continue
            a = (lo - p) / d
            b = (hi - p) / d
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
            if t0 >= t1:
                blocked = False
                break
        if blocked:
            return True
    return False


def points_in_rect(points, rect):
    """Boolean mask of points inside the closed rectangle ``(x0, y0, x1, y1)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x0, y0, x1, y1 = rect
    return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


def project_polyline(x, y, pts, cum):
    """Closest point on a polyline: (arc length, distance, segment index)."""
    p0 = pts[:-1]
    d = np.diff(pts, axis=0)
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(((x - p0[:, 0]) * d[:, 0] + (y - p0[:, 1]) * d[:, 1]) / L2, 0.0, 1.0)
    qx = p0[:, 0] + t * d[:, 0] - x
    qy = p0[:, 1] + t * d[:, 1] - y
    d2 = qx * qx + qy * qy
    i = int(np.argmin(d2))
    return float(cum[i] + t[i] * (cum[i + 1] - cum[i])), math.sqrt(d2[i]), i
