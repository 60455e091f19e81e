"""Synthetic multimodal perception for spotting non-V2V participants.

Pipeline per ego vehicle and frame:

    sense -> pixel_to_angle -> merge_bearings -> fuse_angle_with_ranges
          -> merge_fused -> Kalman tracking

Detections are synthesised straight from scene geometry (no images).
Camera pixels map linearly to angle at 0.184 deg/px, and pixel x grows
counter-clockwise (to the left in the image), so ego-frame angles are CCW
from the vehicle heading.  LIDAR returns come from ray casting at 0.45 deg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .scheduler import Participant, Snapshot

DEG_PER_PX = 0.1840
CAMERA_YAW = {"front": 0.0, "left": 90.0, "rear": 180.0, "right": -90.0}
# half-depth from the visible surface to the object centre, by class
HALF_DEPTH = {"car": 0.15, "person": 0.1}
# footprint (length, width) used to place the centre behind the visible faces
CLASS_DIMS = {"car": (0.425, 0.192), "person": (0.3, 0.3)}


def wrap_deg(a: float) -> float:
    """Wrap an angle to (-180, 180]."""
    a = math.fmod(a + 180.0, 360.0)
    if a <= 0:
        a += 360.0
    return a - 180.0


def wrap_deg_array(a) -> np.ndarray:
    """Vectorised :func:`wrap_deg`."""
    return 180.0 - np.mod(180.0 - np.asarray(a, dtype=float), 360.0)


@dataclass(frozen=True)
class SensorParams:
    width_px: int = 870
    camera_range: float = 12.0
    lidar_range: float = 12.0
    lidar_resolution_deg: float = 0.45
    sigma_px: float = 1.0
    dropout: float = 0.02
    sigma_range: float = 0.01
    # (centre deg, half-width deg, max range m) near-field wedges at the corners
    blind_spots: Tuple[Tuple[float, float, float], ...] = (
        (45.0, 10.0, 0.5), (135.0, 10.0, 0.5), (-135.0, 10.0, 0.5), (-45.0, 10.0, 0.5))
    theta_merge: float = 5.0
    d_merge: float = 0.15
    cluster_gap: float = 0.3
    sigma_a: float = 0.5
    sigma_z: float = 0.1
    track_timeout: float = 1.0

    @property
    def fov_deg(self) -> float:
        return self.width_px * DEG_PER_PX

    def noiseless(self) -> "SensorParams":
        return replace(self, sigma_px=0.0, dropout=0.0, sigma_range=0.0)


@dataclass(frozen=True)
class Calibration:
    """Per-camera additive term of the linear pixel->angle map."""
    bias: Dict[str, float]
    width_px: int

    @classmethod
    def default(cls, width_px: int = 870) -> "Calibration":
        centre = width_px / 2.0
        return cls({cam: yaw - DEG_PER_PX * centre for cam, yaw in CAMERA_YAW.items()}, width_px)


@dataclass(frozen=True)
class Detection:
    camera_id: str
    pixel_x: float
    bbox: Tuple[float, float, float, float]
    class_label: str
    t: float
    object_id: Optional[str] = None


@dataclass(frozen=True)
class Bearing:
    angle: float
    window: Tuple[float, float]
    class_label: str
    object_id: Optional[str]
    t: float
    cameras: Tuple[str, ...] = ()


@dataclass(frozen=True)
class FusedObject:
    object_key: str
    class_label: str
    rel_angle: float
    rel_range: float
    world_pos: Tuple[float, float]
    world_vel: Tuple[float, float] = (0.0, 0.0)
    covariance: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.0, 0.0), (0.0, 0.0))

    def to_record(self) -> dict:
        return {"key": self.object_key, "class": self.class_label,
                "pos": [round(v, 4) for v in self.world_pos], "vel": [round(v, 4) for v in self.world_vel]}


@dataclass(frozen=True)
class KalmanNoise:
    sigma_a: float = 0.5
    sigma_z: float = 0.1


@dataclass(frozen=True)
class KalmanTrack:
    state: np.ndarray
    covariance: np.ndarray
    last_update: float


# -- camera geometry ---------------------------------------------------------

def pixel_to_angle(pixel_x: float, camera_id: str, calibration: Calibration) -> float:
    """Ego-frame angle (deg) of a pixel column: ``0.1840 * pixel + bias``."""
    if not 0.0 <= pixel_x <= calibration.width_px:
        raise ValueError(f"pixel {pixel_x} outside sensor width {calibration.width_px}")
    return wrap_deg(DEG_PER_PX * pixel_x + calibration.bias[camera_id])


def angle_to_pixel(angle: float, camera_id: str, calibration: Calibration) -> float:
    """Inverse map, unwrapped around the camera's optical axis."""
    centre_angle = DEG_PER_PX * calibration.width_px / 2.0 + calibration.bias[camera_id]
    rel = wrap_deg(angle - centre_angle)
    return (rel + centre_angle - calibration.bias[camera_id]) / DEG_PER_PX


def _in_window(angles: np.ndarray, lo: float, hi: float) -> np.ndarray:
    width = wrap_deg(hi - lo) % 360.0 if hi != lo else 0.0
    rel = np.mod(angles - lo, 360.0)
    return rel <= width + 1e-9


def _circular_mean(angles: Sequence[float]) -> float:
    r = np.deg2rad(np.asarray(angles, dtype=float))
    return wrap_deg(math.degrees(math.atan2(np.sin(r).mean(), np.cos(r).mean())))


# -- sensing ---------------------------------------------------------------------

def participant_box(p: Participant) -> Tuple[float, float, float, float, float]:
    return (p.x, p.y, p.heading, p.length / 2.0, p.width / 2.0)


def rect_box(rect: Sequence[float]) -> Tuple[float, float, float, float, float]:
    x0, y0, x1, y1 = rect
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0, (x1 - x0) / 2.0, (y1 - y0) / 2.0)


def sense(world: Snapshot, ego: Tuple[float, float, float], sensor_params: SensorParams,
          rng: np.random.Generator, ego_id: Optional[str] = None,
          occluders: Sequence[Sequence[float]] = (), obstacle_boxes: Sequence[Sequence[float]] = (),
          calibration: Optional[Calibration] = None) -> Tuple[List[Detection], np.ndarray]:
    """Camera detections and a LIDAR point cloud ``[[angle_deg, range_m], ...]``.

    ``ego`` is ``(x, y, heading_rad)``.  Occluders are axis-aligned
    rectangles that block both cameras and LIDAR; obstacle boxes only
    reflect LIDAR.
    """
    sp = sensor_params
    calib = calibration or Calibration.default(sp.width_px)
    ex, ey, eh = ego
    occ = np.asarray(occluders, dtype=float).reshape(-1, 4)
    half_fov = sp.fov_deg / 2.0
    dets: List[Detection] = []
    others = [p for p in world.participants if p.id != ego_id]

    for p in others:
        dx, dy = p.x - ex, p.y - ey
        r = math.hypot(dx, dy)
        if r == 0 or r > sp.camera_range:
            continue
        bearing_w = math.atan2(dy, dx)
        angle = wrap_deg(math.degrees(bearing_w - eh))
        if len(occ) and kernels.segment_hits_rects(ex, ey, p.x, p.y, occ):
            continue
        if any(abs(wrap_deg(angle - c)) <= hw and r <= mr for c, hw, mr in sp.blind_spots):
            continue
        # angular extent from the corner bearings (the near face subtends more than the centre distance suggests)
        ch, sh = math.cos(p.heading), math.sin(p.heading)
        spread = [wrap_deg(math.degrees(math.atan2(dy + i * p.length / 2 * sh + j * p.width / 2 * ch,
                                                   dx + i * p.length / 2 * ch - j * p.width / 2 * sh) - bearing_w))
                  for i in (-1, 1) for j in (-1, 1)]
        half_ang = max(abs(a) for a in spread)
        label = "person" if p.type == "person" else "car"
        for cam, yaw in CAMERA_YAW.items():
            rel_cam = wrap_deg(angle - yaw)
            if abs(rel_cam) - half_ang > half_fov:
                continue
            if sp.dropout > 0 and rng.random() < sp.dropout:
                continue
            noise = rng.normal(0.0, sp.sigma_px) if sp.sigma_px > 0 else 0.0
            centre_px = sp.width_px / 2.0
            lo = (rel_cam - half_ang) / DEG_PER_PX + centre_px + noise
            hi = (rel_cam + half_ang) / DEG_PER_PX + centre_px + noise
            lo, hi = max(lo, 0.0), min(hi, float(sp.width_px))
            if hi <= lo:
                continue
            dets.append(Detection(cam, (lo + hi) / 2.0, (lo, 0.0, hi, 0.0), label, world.t, p.id))

    angles = np.arange(0.0, 360.0, sp.lidar_resolution_deg)
    boxes = [participant_box(p) for p in others]
    boxes += [rect_box(r) for r in occ]
    boxes += [tuple(b) for b in obstacle_boxes]
    if boxes:
        ranges = kernels.raycast_obbs(ex, ey, np.deg2rad(angles) + eh, np.asarray(boxes, dtype=float), sp.lidar_range)
    else:
        ranges = np.full(angles.shape, np.inf)
    hit = np.isfinite(ranges)
    r = ranges[hit]
    if sp.sigma_range > 0 and len(r):
        r = r + rng.normal(0.0, sp.sigma_range, size=r.shape)
    cloud = np.column_stack([wrap_deg_array(angles[hit]), r]) if len(r) else np.empty((0, 2))
    return dets, cloud


# -- fusion --------------------------------------------------------------------------

def to_bearing(det: Detection, calibration: Calibration) -> Bearing:
    lo = pixel_to_angle(det.bbox[0], det.camera_id, calibration)
    hi = pixel_to_angle(det.bbox[2], det.camera_id, calibration)
    return Bearing(pixel_to_angle(det.pixel_x, det.camera_id, calibration), (lo, hi),
                   det.class_label, det.object_id, det.t, (det.camera_id,))


def _union_window(a: Tuple[float, float], b: Tuple[float, float]) -> Tuple[float, float]:
    ref = a[0]
    pts = [0.0, wrap_deg(a[1] - ref) % 360.0, wrap_deg(b[0] - ref), wrap_deg(b[0] - ref) + wrap_deg(b[1] - b[0]) % 360.0]
    return wrap_deg(ref + min(pts)), wrap_deg(ref + max(pts))


def window_gap(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """Angular gap (deg) between two CCW windows; 0 when they overlap."""
    wa, wb = (a[1] - a[0]) % 360.0, (b[1] - b[0]) % 360.0
    ra, rb = (b[0] - a[0]) % 360.0, (a[0] - b[0]) % 360.0
    if ra <= wa or rb <= wb:
        return 0.0
    return min(ra - wa, rb - wb)


def merge_bearings(bearings: Sequence[Bearing], theta_merge: float = 5.0) -> List[Bearing]:
    """Collapse same-class bearings closer than ``theta_merge`` degrees, or whose
    boxes overlap (one car cut by the shared edge of two cameras), into one
    with the union box and circular-mean angle.  Repeats until no pair
    qualifies."""
    items = list(bearings)
    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                a, b = items[i], items[j]
                if a.class_label == b.class_label and (abs(wrap_deg(a.angle - b.angle)) < theta_merge
                                                       or window_gap(a.window, b.window) == 0.0):
                    ids = sorted(x for x in (a.object_id, b.object_id) if x is not None)
                    merged = Bearing(_circular_mean([a.angle, b.angle]), _union_window(a.window, b.window),
                                     a.class_label, ids[0] if ids else None, max(a.t, b.t),
                                     tuple(sorted(set(a.cameras) | set(b.cameras))))
                    items = items[:i] + [merged] + items[i + 1:j] + items[j + 1:]
                    changed = True
                    break
            if changed:
                break
    return items


def nearest_cluster(angle_window: Tuple[float, float], point_cloud, cluster_gap: float = 0.3) -> Optional[np.ndarray]:
    """Points of the nearest range cluster inside an angular window, or None."""
    cloud = np.asarray(point_cloud, dtype=float).reshape(-1, 2)
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    lo, hi = angle_window
    pts = cloud[_in_window(cloud[:, 0], lo, hi)]
    if len(pts) == 0:
        return None
    pts = pts[np.argsort(pts[:, 1], kind="stable")]
    splits = np.nonzero(np.diff(pts[:, 1]) > cluster_gap)[0] + 1
    return min(np.split(pts, splits), key=lambda c: float(np.median(c[:, 1])))


def fuse_angle_with_ranges(angle_window: Tuple[float, float], point_cloud,
                           cluster_gap: float = 0.3) -> Optional[Tuple[float, float]]:
    """Nearest LIDAR cluster inside an angular window -> (median angle, median range)."""
    best = nearest_cluster(angle_window, point_cloud, cluster_gap)
    if best is None:
        return None
    lo = angle_window[0]
    rel = wrap_deg_array(best[:, 0] - lo)
    return wrap_deg(float(np.median(rel)) + lo), float(np.median(best[:, 1]))


_FIT_COARSE = np.deg2rad(np.arange(0.0, 90.0, 3.0))
_FIT_FINE = np.deg2rad(np.arange(-3.0, 3.01, 0.25))


def fit_box_centre(ego: Tuple[float, float, float], cluster, class_label: str,
                   min_points: int = 4) -> Optional[Tuple[float, float]]:
    """World centre of a rectangle of known footprint from its visible outline.

    Searches edge orientations for the one whose two axes best explain the
    points (each point charged its distance to the nearer edge), then puts
    the centre half a footprint behind every face that was only seen edge-on.
    Returns None when the cluster is too small to fit.
    """
    dims = CLASS_DIMS.get(class_label)
    pts = np.asarray(cluster, dtype=float).reshape(-1, 2)
    if dims is None or len(pts) < min_points:
        return None
    ex, ey, eh = ego
    a = np.deg2rad(pts[:, 0]) + eh
    xy = np.column_stack([ex + pts[:, 1] * np.cos(a), ey + pts[:, 1] * np.sin(a)])
    def best(angles):
        c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
        p1 = xy[:, 0] * c + xy[:, 1] * s
        p2 = -xy[:, 0] * s + xy[:, 1] * c
        d1 = np.minimum(p1 - p1.min(1, keepdims=True), p1.max(1, keepdims=True) - p1)
        d2 = np.minimum(p2 - p2.min(1, keepdims=True), p2.max(1, keepdims=True) - p2)
        k = int(np.argmin((np.minimum(d1, d2) ** 2).sum(1)))
        return float(angles[k]), p1[k], p2[k]

    th, _, _ = best(_FIT_COARSE)
    th, q1, q2 = best(th + _FIT_FINE)
    u = np.array([math.cos(th), math.sin(th)])
    v = np.array([-math.sin(th), math.cos(th)])
    o = np.array([ex, ey])
    lo1, hi1, lo2, hi2 = q1.min(), q1.max(), q2.min(), q2.max()
    e1, e2 = hi1 - lo1, hi2 - lo2
    big, small = max(dims), min(dims)
    seen = 0.03  # extents below this are a face seen edge-on

    def score(d1_, d2_):
        return sum(abs(e - d) for e, d in ((e1, d1_), (e2, d2_)) if e > seen)
    dim1, dim2 = (big, small) if score(big, small) <= score(small, big) else (small, big)

    step = math.radians(float(np.median(np.abs(np.diff(np.sort(pts[:, 0]))))) if len(pts) > 1 else 0.0)
    proj = (q1, q2)

    def ray_spacing(i_end, normal):
        # gap between neighbouring hits along a face, at one end of the outline
        q = xy[i_end] - o
        rho = float(np.hypot(*q))
        cos_inc = abs(float(q @ normal)) / max(rho, 1e-9)
        return rho * step / max(cos_inc, 0.2)

    def axis_centre(axis, lo_, hi_, extent, dim, ego_coord, other_extent, normal):
        if extent <= seen:
            # face seen edge-on along this axis: the centre is half a footprint behind it
            return lo_ + dim / 2.0 if ego_coord < lo_ else hi_ - dim / 2.0
        if other_extent > seen:
            # two faces: the corner nearest the ego is exact
            return lo_ + dim / 2.0 if ego_coord < 0.5 * (lo_ + hi_) else hi_ - dim / 2.0
        # one face: the outline stops short of each edge by up to one ray gap
        i_lo, i_hi = int(np.argmin(proj[axis])), int(np.argmax(proj[axis]))
        return 0.5 * (lo_ - 0.5 * ray_spacing(i_lo, normal) + hi_ + 0.5 * ray_spacing(i_hi, normal))

    c1 = axis_centre(0, lo1, hi1, e1, dim1, float(o @ u), e2, v)
    c2 = axis_centre(1, lo2, hi2, e2, dim2, float(o @ v), e1, u)
    centre = c1 * u + c2 * v
    return float(centre[0]), float(centre[1])


def merge_fused(fused: Sequence[FusedObject], d_merge: float = 0.15) -> List[FusedObject]:
    """Collapse fused objects closer than ``d_merge`` metres, to a fixed point."""
    items = list(fused)
    changed = True
    while changed:
        changed = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                a, b = items[i], items[j]
                if math.dist(a.world_pos, b.world_pos) < d_merge:
                    keep, other = (a, b) if a.object_key <= b.object_key else (b, a)
                    pos = ((a.world_pos[0] + b.world_pos[0]) / 2.0, (a.world_pos[1] + b.world_pos[1]) / 2.0)
                    items = items[:i] + [replace(keep, world_pos=pos)] + items[i + 1:j] + items[j + 1:]
                    changed = True
                    break
            if changed:
                break
    return items


def merge_duplicates(bearings: Sequence[Bearing], fused: Sequence[FusedObject],
                     theta_merge: float = 5.0, d_merge: float = 0.15) -> Tuple[List[Bearing], List[FusedObject]]:
    return merge_bearings(bearings, theta_merge), merge_fused(fused, d_merge)


def locate(ego: Tuple[float, float, float], rel_angle: float, rel_range: float, class_label: str) -> Tuple[float, float]:
    """World position of an object centre from its visible-surface fix."""
    ex, ey, eh = ego
    r = rel_range + HALF_DEPTH.get(class_label, 0.0)
    a = eh + math.radians(rel_angle)
    return ex + r * math.cos(a), ey + r * math.sin(a)


# -- Kalman smoothing ------------------------------------------------------------------

_H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])


def _check_psd(P: np.ndarray, name: str):
    if P.shape[0] != P.shape[1] or not np.all(np.isfinite(P)):
        raise ValueError(f"{name} must be a finite square matrix")
    if not np.allclose(P, P.T, atol=1e-9):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(P).min() < -1e-9:
        raise ValueError(f"{name} must be positive semi-definite")


def kalman_init(z: Sequence[float], t: float, noise: KalmanNoise = KalmanNoise(), v_sigma: float = 1.0) -> KalmanTrack:
    return KalmanTrack(np.array([z[0], z[1], 0.0, 0.0]),
                       np.diag([noise.sigma_z ** 2, noise.sigma_z ** 2, v_sigma ** 2, v_sigma ** 2]), t)


def kalman_predict(track: KalmanTrack, dt: float, noise: KalmanNoise) -> Tuple[np.ndarray, np.ndarray]:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    q = noise.sigma_a ** 2
    Q = np.zeros((4, 4))
    for p, v in ((0, 2), (1, 3)):
        Q[p, p] = q * dt ** 4 / 4
        Q[p, v] = Q[v, p] = q * dt ** 3 / 2
        Q[v, v] = q * dt ** 2
    x = F @ track.state
    P = F @ track.covariance @ F.T + Q
    return x, 0.5 * (P + P.T)


def kalman_update(track: KalmanTrack, z: Sequence[float], dt: float, noise: KalmanNoise = KalmanNoise()) -> KalmanTrack:
    """Constant-velocity predict + position update (Joseph form)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_psd(np.asarray(track.covariance, dtype=float), "covariance")
    x, P = kalman_predict(track, dt, noise)
    t = track.last_update + dt
    if not math.isfinite(noise.sigma_z):
        return KalmanTrack(x, P, t)
    R = np.eye(2) * noise.sigma_z ** 2
    S = _H @ P @ _H.T + R
    K = np.linalg.solve(S.T, (P @ _H.T).T).T
    x = x + K @ (np.asarray(z, dtype=float) - _H @ x)
    IKH = np.eye(4) - K @ _H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    return KalmanTrack(x, 0.5 * (P + P.T), t)


class Tracker:
    """Per-ego set of Kalman tracks keyed by object key."""

    def __init__(self, noise: KalmanNoise = KalmanNoise(), timeout: float = 1.0):
        self.noise = noise
        self.timeout = timeout
        self.tracks: Dict[str, KalmanTrack] = {}

    def update(self, fused: Sequence[FusedObject], t: float) -> List[FusedObject]:
        out = []
        for f in fused:
            tr = self.tracks.get(f.object_key)
            if tr is None or t - tr.last_update > self.timeout:
                tr = kalman_init(f.world_pos, t, self.noise)
            elif t > tr.last_update:
                tr = kalman_update(tr, f.world_pos, t - tr.last_update, self.noise)
            self.tracks[f.object_key] = tr
            P = tr.covariance
            out.append(replace(f, world_pos=(float(tr.state[0]), float(tr.state[1])),
                               world_vel=(float(tr.state[2]), float(tr.state[3])),
                               covariance=((float(P[0, 0]), float(P[0, 1])), (float(P[1, 0]), float(P[1, 1])))))
        for k in [k for k, tr in self.tracks.items() if t - tr.last_update > self.timeout]:
            del self.tracks[k]
        return out

    def age(self, key: str) -> int:
        return 0 if key not in self.tracks else 1


def perceive(world: Snapshot, ego: Tuple[float, float, float], ego_id: Optional[str], sensor_params: SensorParams,
             rng: np.random.Generator, tracker: Optional[Tracker] = None,
             occluders: Sequence[Sequence[float]] = (), obstacle_boxes: Sequence[Sequence[float]] = (),
             calibration: Optional[Calibration] = None) -> List[FusedObject]:
    """Full pipeline for one frame; returns tracked objects when a tracker is given."""
    sp = sensor_params
    calib = calibration or Calibration.default(sp.width_px)
    dets, cloud = sense(world, ego, sp, rng, ego_id, occluders, obstacle_boxes, calib)
    if not dets or len(cloud) == 0:
        return tracker.update([], world.t) if tracker else []
    bearings = merge_bearings([to_bearing(d, calib) for d in dets], sp.theta_merge)
    fused = []
    for b in bearings:
        cluster = nearest_cluster(b.window, cloud, sp.cluster_gap)
        if cluster is None:
            continue
        fix = fuse_angle_with_ranges(b.window, cluster, sp.cluster_gap)
        pos = fit_box_centre(ego, cluster, b.class_label) or locate(ego, fix[0], fix[1], b.class_label)
        fused.append(FusedObject(b.object_id or f"obj@{b.angle:.1f}", b.class_label, fix[0], fix[1], pos))
    fused = merge_fused(fused, sp.d_merge)
    return tracker.update(fused, world.t) if tracker else fused
