"""Intersection geometry: conflict blocks, vehicle paths and their block spans.

Paths are polylines (curves are discretised at roughly 1 cm chord length).
A path's span through a block is the arc-length interval of the polyline
clipped to the block rectangle, computed segment by segment.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

Rect = Tuple[float, float, float, float]

ARC_STEP = 0.01
_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for malformed intersection configurations or path misuse."""


@dataclass(frozen=True)
class ConflictBlock:
    id: str
    region: Rect

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise GeometryError(f"block {self.id!r} has non-positive area")


@dataclass(eq=False)
class Path:
    id: str
    polyline: np.ndarray
    block_spans: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.polyline, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise GeometryError(f"path {self.id!r} needs at least two points")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= 0):
            raise GeometryError(f"path {self.id!r}: arc length must strictly increase")
        self.polyline = pts
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self._cum_list = self.cum.tolist()
        self._pts_list = pts.tolist()

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def blocks_in_order(self) -> List[str]:
        return sorted(self.block_spans, key=lambda b: self.block_spans[b][0])

    def point_at(self, s: float) -> Tuple[float, float, float]:
        """Position and heading (radians) at arc length ``s`` (clamped to the path)."""
        cum = self._cum_list
        s = min(max(s, 0.0), cum[-1])
        i = min(bisect.bisect_right(cum, s) - 1, len(cum) - 2)
        (x0, y0), (x1, y1) = self._pts_list[i], self._pts_list[i + 1]
        f = (s - cum[i]) / (cum[i + 1] - cum[i])
        return x0 + f * (x1 - x0), y0 + f * (y1 - y0), math.atan2(y1 - y0, x1 - x0)

    def project(self, x: float, y: float) -> Tuple[float, float, float]:
        """Closest point on the path: (arc length, lateral distance, tangent heading)."""
        s, dist, i = kernels.project_polyline(float(x), float(y), self.polyline, self.cum)
        (x0, y0), (x1, y1) = self._pts_list[i], self._pts_list[i + 1]
        return s, dist, math.atan2(y1 - y0, x1 - x0)


def _clip_segment(p, q, rect) -> Optional[Tuple[float, float]]:
    """Parametric [t0, t1] of segment p->q inside the closed rectangle, or None."""
    t0, t1 = 0.0, 1.0
    for a, d, lo, hi in ((p[0], q[0] - p[0], rect[0], rect[2]), (p[1], q[1] - p[1], rect[1], rect[3])):
        if abs(d) < 1e-15:
            if a < lo - _TOL or a > hi + _TOL:
                return None
            continue
        u, v = (lo - a) / d, (hi - a) / d
        if u > v:
            u, v = v, u
        t0, t1 = max(t0, u), min(t1, v)
        if t0 > t1 + 1e-12:
            return None
    return t0, t1


def _strictly_inside(x, y, rect) -> bool:
    return rect[0] + _TOL < x < rect[2] - _TOL and rect[1] + _TOL < y < rect[3] - _TOL


def compute_span(path: Path, block: ConflictBlock) -> Optional[Tuple[float, float]]:
    """Arc-length interval of ``path`` inside ``block``; None if disjoint.

    Raises GeometryError when the path only touches the block boundary
    (zero-length intersection).
    """
    enter = exit_ = None
    touched = False
    pts = path.polyline
    for i in range(len(pts) - 1):
        clip = _clip_segment(pts[i], pts[i + 1], block.region)
        if clip is None:
            continue
        touched = True
        t0, t1 = clip
        seg_len = path.cum[i + 1] - path.cum[i]
        if (t1 - t0) * seg_len < _TOL:
            continue
        tm = 0.5 * (t0 + t1)
        mx = pts[i][0] + tm * (pts[i + 1][0] - pts[i][0])
        my = pts[i][1] + tm * (pts[i + 1][1] - pts[i][1])
        if not _strictly_inside(mx, my, block.region):
            continue
        s0 = path.cum[i] + t0 * seg_len
        s1 = path.cum[i] + t1 * seg_len
        enter = s0 if enter is None else min(enter, s0)
        exit_ = s1 if exit_ is None else max(exit_, s1)
    if enter is None:
        if touched:
            raise GeometryError(f"path {path.id!r} grazes block {block.id!r} with zero-length intersection")
        return None
    return float(enter), float(exit_)


@dataclass(eq=False)
class IntersectionModel:
    blocks: List[ConflictBlock]
    paths: Dict[str, Path]
    stop_line_offset: float = 0.05

    def path(self, path_id: str) -> Path:
        try:
            return self.paths[path_id]
        except KeyError:
            raise GeometryError(f"unknown path {path_id!r}") from None

    def block(self, block_id: str) -> ConflictBlock:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise GeometryError(f"unknown block {block_id!r}")

    def occupancy_span(self, path_id: str, body_length: float = 0.0) -> Tuple[float, float]:
        """Centre-point arc-length interval during which a vehicle body of the given
        length overlaps any block on its path."""
        spans = self.path(path_id).block_spans.values()
        half = 0.5 * body_length
        return min(s[0] for s in spans) - half, max(s[1] for s in spans) + half

    def stop_line_s(self, path_id: str, body_length: float = 0.0) -> float:
        return self.occupancy_span(path_id, body_length)[0] - self.stop_line_offset

    def conflicting_blocks(self, a: str, b: str) -> List[str]:
        return sorted(set(self.path(a).block_spans) & set(self.path(b).block_spans))


def paths_conflict(a, b, model: IntersectionModel) -> bool:
    """True iff the two paths share at least one conflict block."""
    a_id = a.id if isinstance(a, Path) else a
    b_id = b.id if isinstance(b, Path) else b
    return bool(model.conflicting_blocks(a_id, b_id))


def block_span(path: Path, block_id: str) -> Tuple[float, float]:
    try:
        return path.block_spans[block_id]
    except KeyError:
        raise GeometryError(f"path {path.id!r} does not cross block {block_id!r}") from None


# -- default four-way layout ------------------------------------------------

APPROACHES = ("nb", "wb", "sb", "eb")  # successive 90 degree rotations of "nb"
MANEUVERS = ("straight", "left", "right")


def _arc(cx, cy, r, a0, a1):
    n = max(2, int(math.ceil(abs(a1 - a0) * r / ARC_STEP)) + 1)
    a = np.linspace(a0, a1, n)
    return np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a)])


def _northbound_paths(half_block, lane_width, half_canvas):
    B, C, o = half_block, half_canvas, lane_width / 2.0
    straight = np.array([[o, -C], [o, C]])
    right = np.vstack([[[o, -C]], _arc(B, -B, B - o, math.pi, math.pi / 2), [[C, -o]]])
    left = np.vstack([[[o, -C]], _arc(-B, -B, B + o, 0.0, math.pi / 2), [[-C, o]]])
    return {"straight": straight, "left": left, "right": right}


def _rotate(pts, k):
    a = k * math.pi / 2
    c, s = round(math.cos(a)), round(math.sin(a))
    return np.column_stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1]])


def _dedupe(pts):
    keep = np.concatenate([[True], np.hypot(*np.diff(pts, axis=0).T) > 1e-12])
    return pts[keep]


def four_way_layout(block_size=0.9, lane_width=0.45, canvas=4.5, grid=1):
    """Blocks and path polylines for a four-way, one-lane-per-direction crossroads."""
    B = block_size / 2.0
    if lane_width / 2.0 >= B:
        raise GeometryError("lane centre must lie inside the block")
    if canvas / 2.0 <= B:
        raise GeometryError("canvas must extend beyond the block")
    if grid < 1:
        raise GeometryError("grid must be >= 1")
    step = block_size / grid
    blocks = []
    for j in range(grid):
        for i in range(grid):
            x0 = -B + i * step
            y0 = -B + j * step
            bid = "main" if grid == 1 else f"b{j}{i}"
            blocks.append({"id": bid, "region": [x0, y0, x0 + step, y0 + step]})
    base = _northbound_paths(B, lane_width, canvas / 2.0)
    paths = []
    for k, approach in enumerate(APPROACHES):
        for m in MANEUVERS:
            paths.append({"id": f"{approach}_{m}", "polyline": _dedupe(_rotate(base[m], k)).tolist()})
    return blocks, paths


def build_model(config: Optional[dict] = None) -> IntersectionModel:
    """Build an IntersectionModel from the geometry section of a scenario.

    Either ``{"layout": "four_way", ...}`` (keys ``block_size``, ``lane_width``,
    ``canvas``, ``grid``) or explicit ``blocks``/``paths`` lists.
    """
    config = dict(config or {"layout": "four_way"})
    if config.get("layout") == "four_way":
        blocks_cfg, paths_cfg = four_way_layout(
            block_size=config.get("block_size", 0.9),
            lane_width=config.get("lane_width", 0.45),
            canvas=config.get("canvas", 4.5),
            grid=config.get("grid", 1),
        )
        if "paths" in config:
            wanted = set(config["paths"])
            paths_cfg = [p for p in paths_cfg if p["id"] in wanted]
    else:
        blocks_cfg = config.get("blocks", [])
        paths_cfg = config.get("paths", [])

    if not blocks_cfg:
        raise GeometryError("intersection needs at least one block")
    blocks = [ConflictBlock(str(b["id"]), tuple(float(v) for v in b["region"])) for b in blocks_cfg]
    ids = [b.id for b in blocks]
    if len(set(ids)) != len(ids):
        raise GeometryError("duplicate block ids")
    for i, a in enumerate(blocks):
        for b in blocks[i + 1:]:
            ox = min(a.region[2], b.region[2]) - max(a.region[0], b.region[0])
            oy = min(a.region[3], b.region[3]) - max(a.region[1], b.region[1])
            if ox > _TOL and oy > _TOL:
                raise GeometryError(f"blocks {a.id!r} and {b.id!r} overlap")

    paths: Dict[str, Path] = {}
    for pc in paths_cfg:
        p = Path(str(pc["id"]), np.asarray(pc["polyline"], dtype=float))
        if p.id in paths:
            raise GeometryError(f"duplicate path id {p.id!r}")
        for b in blocks:
            span = compute_span(p, b)
            if span is not None:
                p.block_spans[b.id] = span
        if not p.block_spans:
            raise GeometryError(f"path {p.id!r} does not cross any block")
        paths[p.id] = p
    if not paths:
        raise GeometryError("intersection needs at least one path")
    return IntersectionModel(blocks, paths, float(config.get("stop_line_offset", 0.05)))


def rect_contains(rect: Sequence[float], x: float, y: float) -> bool:
    return rect[0] <= x <= rect[2] and rect[1] <= y <= rect[3]
