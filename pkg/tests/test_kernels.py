import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leasesim import _pykernels as py
from leasesim import kernels

pytestmark = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")

if kernels.BACKEND == "cython":
    from leasesim import _ckernels as cy

box = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-math.pi, math.pi),
                st.floats(0.05, 0.6), st.floats(0.05, 0.6))


def point_sampling_overlap(a, b, n=60):
    """Oracle: does any grid point of ``a`` fall strictly inside ``b``?"""
    cx, cy, h, hl, hw = a
    u = np.linspace(-1, 1, n)
    gx, gy = np.meshgrid(u * hl, u * hw)
    x = cx + gx * math.cos(h) - gy * math.sin(h)
    y = cy + gx * math.sin(h) + gy * math.cos(h)
    bx, by, bh, bl, bw = b
    lx = (x - bx) * math.cos(bh) + (y - by) * math.sin(bh)
    ly = -(x - bx) * math.sin(bh) + (y - by) * math.cos(bh)
    return bool(np.any((np.abs(lx) < bl) & (np.abs(ly) < bw)))


@settings(max_examples=300, deadline=None)
@given(box, box)
def test_obb_parity_and_oracle(a, b):
    got = cy.obb_overlap(a, b)
    assert got == py.obb_overlap(a, b)
    if point_sampling_overlap(a, b) or point_sampling_overlap(b, a):
        assert got


@settings(max_examples=100, deadline=None)
@given(st.lists(box, min_size=0, max_size=5), st.floats(-3, 3), st.floats(-3, 3))
def test_raycast_parity(boxes, ox, oy):
    angles = np.linspace(-math.pi, math.pi, 97)
    arr = np.asarray(boxes, dtype=float).reshape(-1, 5)
    np.testing.assert_allclose(cy.raycast_obbs(ox, oy, angles, arr, 12.0),
                               py.raycast_obbs(ox, oy, angles, arr, 12.0), rtol=1e-9, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3),
       st.lists(st.tuples(st.floats(-2, 1), st.floats(-2, 1), st.floats(0.1, 1), st.floats(0.1, 1)), max_size=4))
def test_segment_parity(x0, y0, x1, y1, rects):
    arr = np.asarray([(a, b, a + w, b + h) for a, b, w, h in rects], dtype=float).reshape(-1, 4)
    assert bool(cy.segment_hits_rects(x0, y0, x1, y1, arr)) == bool(py.segment_hits_rects(x0, y0, x1, y1, arr))


def test_points_in_rect_parity():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, size=(500, 2))
    rect = (-0.5, -1.0, 1.0, 0.3)
    np.testing.assert_array_equal(np.asarray(cy.points_in_rect(pts, rect), dtype=bool),
                                  np.asarray(py.points_in_rect(pts, rect), dtype=bool))


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_project_polyline_parity(x, y, seed):
    rng = np.random.default_rng(seed)
    pts = np.cumsum(rng.uniform(0.05, 1.0, size=(8, 2)) * rng.choice([-1, 1], size=(8, 2)), axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    s1, d1, i1 = cy.project_polyline(x, y, pts, cum)
    s2, d2, i2 = py.project_polyline(x, y, pts, cum)
    assert d1 == pytest.approx(d2, abs=1e-9)
    if i1 == i2:
        assert s1 == pytest.approx(s2, abs=1e-9)
