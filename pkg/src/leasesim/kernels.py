"""Kernel selection.

The compiled extension is used when it imports cleanly; set
``LEASESIM_PURE_PYTHON=1`` to force the reference implementation.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("LEASESIM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

obb_overlap = _impl.obb_overlap
raycast_obbs = _impl.raycast_obbs
segment_hits_rects = _impl.segment_hits_rects
points_in_rect = _impl.points_in_rect
project_polyline = _impl.project_polyline

__all__ = ["BACKEND", "obb_overlap", "raycast_obbs", "segment_hits_rects", "points_in_rect", "project_polyline"]
