"""Deterministic fixed-step simulation of one intersection scenario.

Each 10 ms tick runs, in order: spawns and obstacle changes, ground-truth
physics, collision detection, watch delivery to replicas, then the agents
whose 100 ms decision slot falls on this tick (staggered by agent index,
ties broken by id).  All randomness comes from streams derived from the
scenario seed, and time is an integer tick count, so a (scenario, seed) pair
always produces the same trace bytes.
"""

from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path as FsPath
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .dynamics import Phase, MotorState, VehicleParams, VehicleState, controller_step, plant_step
from .geometry import IntersectionModel, build_model
from .network import NetParams, sample_latency, sample_loss, staleness_bound
from .perception import KalmanNoise, SensorParams, Tracker, perceive
from .planner import PlanDirective, Reason, gate_brake, plan_speed, stopping_distance
from .scheduler import (Feasibility, arrival_time, Lease, LeaseClient, LeaseKind, LeaseRetryError, LockState,
                        Participant, SchedulerError, SchedulerParams, Snapshot, apply_for_lease,
                        audit_non_overlap, cancel_leases, cancel_proxy, check_feasibility,
                        estimate_occupancy, extend_if_expiring, lock_acquire, lock_release,
                        predict_constant_speed, proxy_lease_for_non_v2v, try_bring_forward)
from .store import (LOCK_KEY, SYSTEM, CoordinationStore, Replica, StoreUnavailable, decode_record,
                    encode_record, state_key, surrounding_key)

DT = 0.01
DECISION_TICKS = 10
ALGORITHMS = ("lease", "lock")
LOCK_REQUEST_DISTANCE = 0.1
LOCK_REQUEST_SPEED = 0.05
REFLEX_BUFFER = 0.03
V2V_MATCH_RADIUS = 0.5
PROXY_LOST_AFTER = 0.5


class ScenarioError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


# -- scenario -----------------------------------------------------------------

@dataclass
class VehicleSpec:
    id: str
    path_id: str
    spawn_time: float = 0.0
    initial_s: float = 0.0
    initial_speed: float = 0.0
    is_v2v: bool = True
    type: str = "car"
    params: dict = field(default_factory=dict)


@dataclass
class ObstacleSpec:
    id: str
    rect: Tuple[float, float, float, float]
    appear_time: float = 0.0
    clear_time: float = math.inf


@dataclass
class Scenario:
    name: str = "scenario"
    geometry: dict = field(default_factory=lambda: {"layout": "four_way"})
    vehicles: List[VehicleSpec] = field(default_factory=list)
    obstacles: List[ObstacleSpec] = field(default_factory=list)
    occluders: List[Tuple[float, float, float, float]] = field(default_factory=list)
    algorithm: str = "lease"
    net: NetParams = field(default_factory=NetParams)
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    vehicle_defaults: dict = field(default_factory=dict)
    sensors: dict = field(default_factory=dict)
    perception: bool = False
    jitter: dict = field(default_factory=dict)
    no_v2v: Tuple[str, ...] = ()
    outages: List[Tuple[float, float]] = field(default_factory=list)
    seed: int = 0
    duration: float = 30.0
    description: str = ""

    def validate(self, model: Optional[IntersectionModel] = None):
        ids = [v.id for v in self.vehicles]
        if len(ids) != len(set(ids)):
            raise ScenarioError("vehicle ids must be unique")
        if self.algorithm not in ALGORITHMS:
            raise ScenarioError(f"unknown algorithm {self.algorithm!r}")
        if self.scheduler.lock_request not in ("stop", "approach"):
            raise ScenarioError(f"unknown lock_request {self.scheduler.lock_request!r}")
        if not self.duration > 0:
            raise ScenarioError("duration must be positive")
        for v in self.vehicles:
            if not 0.0 <= v.spawn_time <= self.duration:
                raise ScenarioError(f"{v.id}: spawn time outside the run")
            if v.initial_speed < 0:
                raise ScenarioError(f"{v.id}: negative initial speed")
            if model is not None and v.path_id not in model.paths:
                raise ScenarioError(f"{v.id}: unknown path {v.path_id!r}")
        for o in self.obstacles:
            if not (o.rect[0] < o.rect[2] and o.rect[1] < o.rect[3]):
                raise ScenarioError(f"obstacle {o.id}: degenerate rectangle")
        for nid in self.no_v2v:
            if nid not in ids:
                raise ScenarioError(f"--no-v2v names unknown vehicle {nid!r}")

    def with_overrides(self, **kw) -> "Scenario":
        return replace(copy.deepcopy(self), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        try:
            d["vehicles"] = [VehicleSpec(**v) for v in d.get("vehicles", [])]
            d["obstacles"] = [ObstacleSpec(o["id"], tuple(o["rect"]), o.get("appear_time", 0.0),
                                           o.get("clear_time", math.inf)) for o in d.get("obstacles", [])]
            d["occluders"] = [tuple(r) for r in d.get("occluders", [])]
            d["net"] = NetParams.from_dict(d.get("net"))
            d["scheduler"] = SchedulerParams.from_dict(d.get("scheduler"))
            d["no_v2v"] = tuple(d.get("no_v2v", ()))
            d["outages"] = [tuple(w) for w in d.get("outages", [])]
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from None


def load_scenario(source) -> Scenario:
    """Scenario from a dict, a JSON file path, or the name of a bundled scenario."""
    if isinstance(source, Scenario):
        return source
    if isinstance(source, dict):
        return Scenario.from_dict(source)
    path = FsPath(source)
    if not path.exists():
        bundled = resources.files("leasesim") / "scenarios" / f"{source}.json"
        if not bundled.is_file():
            raise FileNotFoundError(f"no scenario file {source!r}")
        return Scenario.from_dict(json.loads(bundled.read_text()))
    try:
        return Scenario.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def bundled_scenarios() -> List[str]:
    root = resources.files("leasesim") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


# -- trace -------------------------------------------------------------------------

def _clean(obj, nd=6):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
        r = round(obj, nd)
        return 0.0 if r == 0 else r
    if isinstance(obj, dict):
        return {str(k): _clean(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v, nd) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item(), nd)
    return obj


class Trace:
    """JSON-lines sink; records are serialised with sorted keys."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.lines: List[str] = []

    def emit(self, kind: str, **fields):
        if self.enabled:
            fields["kind"] = kind
            self.lines.append(json.dumps(_clean(fields), sort_keys=True, separators=(",", ":")))

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


def read_trace(path) -> List[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {n}: {exc}") from None
            if not isinstance(rec, dict) or "kind" not in rec:
                raise ValueError(f"line {n}: not a trace record")
            out.append(rec)
    return out


# -- ground truth helpers ------------------------------------------------------------

def detect_collisions(boxes: Dict[str, Sequence[float]]) -> List[Tuple[str, str]]:
    """Pairs whose oriented rectangles ``(cx, cy, heading, half_len, half_wid)`` overlap."""
    ids = sorted(boxes)
    out = []
    for i, a in enumerate(ids):
        ba = boxes[a]
        ra = math.hypot(ba[3], ba[4])
        for b in ids[i + 1:]:
            bb = boxes[b]
            if math.hypot(ba[0] - bb[0], ba[1] - bb[1]) > ra + math.hypot(bb[3], bb[4]):
                continue
            if kernels.obb_overlap(ba, bb):
                out.append((a, b))
    return out


def vehicle_box(x, y, heading, length, width):
    return (x, y, heading, length / 2.0, width / 2.0)


def rect_as_box(rect):
    x0, y0, x1, y1 = rect
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0, (x1 - x0) / 2.0, (y1 - y0) / 2.0)


def first_contact_s(model: IntersectionModel, path_id: str, rect, length: float, width: float,
                    step: float = 0.01) -> Optional[float]:
    """Smallest centre arc-length at which a body on the path touches ``rect``."""
    path = model.path(path_id)
    box = rect_as_box(rect)
    for s in np.arange(0.0, path.length + step, step):
        x, y, h = path.point_at(min(s, path.length))
        if kernels.obb_overlap(vehicle_box(x, y, h, length, width), box):
            return max(0.0, float(s) - step)
    return None


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


# -- agents ----------------------------------------------------------------------------

@dataclass
class Agent:
    spec: VehicleSpec
    index: int
    params: VehicleParams
    mode: str  # "lease" | "lock" | "free"
    state: Optional[VehicleState] = None
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    spawned_at: Optional[float] = None
    post_at: Optional[float] = None
    finished: bool = False
    directive: PlanDirective = PlanDirective(0.0, Reason.NO_LEASE_CRUISE)
    client: Optional[LeaseClient] = None
    replica: Optional[Replica] = None
    tracker: Optional[Tracker] = None
    rng: Optional[np.random.Generator] = None
    lease: List[Lease] = field(default_factory=list)
    released: bool = False
    holds_lock: bool = False
    lock_queued: bool = False
    stops: int = 0
    energy: float = 0.0
    moving: bool = False
    proxies: Dict[str, float] = field(default_factory=dict)
    cruise: float = 0.0

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def alive(self) -> bool:
        return self.state is not None and not self.finished


@dataclass
class RunResult:
    metrics: dict
    trace: Optional[List[str]]
    store_log: List[dict]
    lease_events: List[dict]

    def __iter__(self):
        yield self.metrics
        yield self.trace


class Simulation:
    def __init__(self, scenario: Scenario, trace: bool = True, debug_invariants: bool = False):
        self.sc = scenario
        self.model = build_model(scenario.geometry)
        scenario.validate(self.model)
        self.debug = debug_invariants
        self.trace = Trace(trace)
        ss = np.random.SeedSequence(int(scenario.seed))
        jit_ss, net_ss, perc_ss = ss.spawn(3)
        self.rng_net = np.random.default_rng(net_ss)
        self.net = scenario.net
        self.store = CoordinationStore(self._latency, scenario.outages)
        self.store.listeners.append(self._on_store_op)
        self.sched = scenario.scheduler
        self.sensor = SensorParams(**scenario.sensors) if scenario.sensors else SensorParams()
        self.lease_events: List[dict] = []
        self.collisions: List[dict] = []
        self._colliding: set = set()
        self.max_staleness = 0.0
        self.violations: List[str] = []
        self.abort: Optional[str] = None
        self._contact: Dict[tuple, Optional[float]] = {}
        self.agents: List[Agent] = []
        base = VehicleParams().with_overrides(scenario.vehicle_defaults)
        jit = scenario.jitter
        jrng = np.random.default_rng(jit_ss)
        perc_streams = perc_ss.spawn(len(scenario.vehicles))
        for i, vs in enumerate(scenario.vehicles):
            vs = copy.deepcopy(vs)
            vs.spawn_time = min(scenario.duration, max(0.0, vs.spawn_time + jrng.uniform(0, jit.get("spawn_time", 0.0))))
            vs.initial_s = max(0.0, vs.initial_s + jrng.uniform(-1, 1) * jit.get("initial_s", 0.0))
            vs.initial_speed = max(0.0, vs.initial_speed + jrng.uniform(-1, 1) * jit.get("initial_speed", 0.0))
            if not vs.is_v2v or vs.id in scenario.no_v2v:
                mode = "free"
            else:
                mode = scenario.algorithm
            params = base.with_overrides(vs.params)
            a = Agent(vs, i, params, mode, rng=np.random.default_rng(perc_streams[i]))
            a.cruise = vs.initial_speed if mode == "free" else self.sched.v_advised
            self.agents.append(a)
        self.n_ticks = int(round(scenario.duration / DT))

    # -- store plumbing --

    def _latency(self, subscriber: str) -> float:
        return sample_latency(self.net, self.rng_net)

    def _on_store_op(self, rec: dict):
        self.trace.emit("store-op", **rec)
        if self.debug and rec.get("ok") and rec.get("op") == "txn":
            leases = [Lease.from_record(decode_record(e.value)) for e in self.store.range_read("intersection/")
                      if "/leases/" in e.key]
            bad = audit_non_overlap(leases, self.model)
            if bad:
                a, b = bad[0]
                self._violation(f"lease overlap {a.lease_id}/{b.lease_id} on {a.block_id}")

    def _emit_lease(self, kind: str, agent_id: str, leases: Sequence[Lease], **extra):
        rec = {"t": self.store.now, "event": kind, "agent": agent_id,
               "leases": [l.to_record() for l in leases], **extra}
        self.lease_events.append(_clean(rec))
        self.trace.emit("lease-event", **rec)

    def _violation(self, msg: str):
        self.violations.append(msg)
        self.trace.emit("invariant", t=self.store.now, message=msg)
        raise InvariantViolation(msg)

    # -- geometry helpers --

    def _contact_s(self, path_id, obstacle: ObstacleSpec, length, width):
        key = (path_id, obstacle.id, length, width)
        if key not in self._contact:
            self._contact[key] = first_contact_s(self.model, path_id, obstacle.rect, length, width)
        return self._contact[key]

    def _active_obstacles(self, t: float) -> List[ObstacleSpec]:
        return [o for o in self.sc.obstacles if o.appear_time <= t + 1e-9 < o.clear_time]

    def _obstacle_gaps(self, a: Agent, t: float) -> List[float]:
        out = []
        for o in self._active_obstacles(t):
            s_hit = self._contact_s(a.spec.path_id, o, a.params.length, a.params.width)
            if s_hit is not None and s_hit >= a.state.s - 0.05:
                out.append(max(0.0, s_hit - a.state.s))
        return out

    def _leader_gaps(self, a: Agent) -> List[float]:
        path = self.model.path(a.spec.path_id)
        out = []
        for b in self.agents:
            if b is a or not b.alive:
                continue
            if math.hypot(b.x - a.x, b.y - a.y) > 2.5 or math.cos(b.heading - a.heading) < 0.0:
                continue
            s_b, lat, h = path.project(b.x, b.y)
            if abs(lat) > 0.2 or abs(_wrap(b.heading - h)) > math.radians(45) or s_b <= a.state.s:
                continue
            out.append(max(0.0, s_b - a.state.s - 0.5 * (a.params.length + b.params.length)))
        return out

    def _blocked(self, a: Agent, t: float) -> bool:
        _, exit_s = self.model.occupancy_span(a.spec.path_id, a.params.length)
        for o in self._active_obstacles(t):
            s_hit = self._contact_s(a.spec.path_id, o, a.params.length, a.params.width)
            if s_hit is not None and a.state.s - 0.05 <= s_hit < exit_s:
                return True
        return False

    # -- lifecycle --

    def _spawn(self, a: Agent, t: float):
        v0 = a.spec.initial_speed
        a.state = VehicleState(a.id, a.spec.path_id, a.spec.initial_s, v0, Phase.PLANNING, a.mode != "free",
                               MotorState(v_current=v0))
        a.x, a.y, a.heading = self.model.path(a.spec.path_id).point_at(a.spec.initial_s)
        a.spawned_at = t
        a.moving = v0 > LOCK_REQUEST_SPEED
        a.directive = PlanDirective(a.cruise if a.mode == "free" else v0, Reason.NO_LEASE_CRUISE)
        if a.mode != "free":
            a.replica = Replica(self.store, a.id)
            if a.mode == "lease":
                a.client = LeaseClient(a.id, a.spec.path_id, self.store, self.model, self.sched, a.replica,
                                       self._emit_lease)
            if self.sc.perception and a.mode == "lease":
                a.tracker = Tracker(KalmanNoise(self.sensor.sigma_a, self.sensor.sigma_z), self.sensor.track_timeout)
        enter_s, exit_s = self.model.occupancy_span(a.spec.path_id, a.params.length)
        if a.spec.initial_s >= exit_s:
            a.state.phase = Phase.POST_CROSSING
        elif a.spec.initial_s >= enter_s:
            a.state.phase = Phase.CROSSING
        self.trace.emit("spawn", t=t, id=a.id, path=a.spec.path_id, s=a.spec.initial_s, v=v0, mode=a.mode)

    def _finish(self, a: Agent, t: float):
        a.finished = True
        if a.mode == "free":
            return
        try:
            if a.client is not None:
                for key in list(a.proxies):
                    cancel_proxy(a.client, key)
                if a.lease:
                    cancel_leases(a.client, a.lease, "released")
            if self.store.get(state_key(a.id)) is not None:
                self.store.delete(state_key(a.id), a.id)
            if self.store.get(surrounding_key(a.id)) is not None:
                self.store.delete(surrounding_key(a.id), a.id)
        except (StoreUnavailable, LeaseRetryError):
            pass
        self.trace.emit("finish", t=t, id=a.id)

    # -- physics --

    def _physics(self, t_next: float):
        for a in self.agents:
            if not a.alive:
                continue
            st, p = a.state, a.params
            d = a.directive
            decels = []
            if d.brake_decel is not None:
                decels.append(d.brake_decel)
            g = gate_brake(st.s, st.speed, d, t_next, p.a_min, DT)
            if g is not None:
                decels.append(g)
            gaps = self._obstacle_gaps(a, t_next - DT) + self._leader_gaps(a)
            if gaps and min(gaps) <= stopping_distance(st.speed, p.a_min) + st.speed * DT + REFLEX_BUFFER:
                decels.append(-p.a_min)
            brake = max(decels) if decels else None
            motor, duty = controller_step(p, st.motor, 0.0 if brake is not None else d.v_target, DT)
            motor = plant_step(p, motor, duty, DT, brake)
            s_old, v_old = st.s, st.speed
            st.motor = motor
            st.s = a.spec.initial_s + motor.odometer_s
            st.speed = motor.v_current
            if self.debug and abs(st.s - s_old) > p.v_max * DT + 1e-9:
                self._violation(f"{a.id} teleported {st.s - s_old:.4f} m in one tick")
            a.energy += abs(st.speed - v_old)
            if a.moving and st.speed < 0.01:
                a.stops += 1
                a.moving = False
            elif st.speed > LOCK_REQUEST_SPEED:
                a.moving = True
            path = self.model.path(a.spec.path_id)
            a.x, a.y, a.heading = path.point_at(min(st.s, path.length))
            enter_s, exit_s = self.model.occupancy_span(a.spec.path_id, p.length)
            old_phase = st.phase
            if st.s >= exit_s:
                st.phase = Phase.POST_CROSSING
            elif st.s >= enter_s and st.phase is Phase.PLANNING:
                st.phase = Phase.CROSSING
            if self.debug and _PHASE_ORDER[st.phase] < _PHASE_ORDER[old_phase]:
                self._violation(f"{a.id} phase went backwards")
            if st.phase is Phase.POST_CROSSING and a.post_at is None:
                a.post_at = t_next
            if st.phase is not old_phase:
                self.trace.emit("phase", t=t_next, id=a.id, phase=st.phase.value)
            if st.s >= path.length - 0.5 * p.length:
                self._finish(a, t_next)

    def _collisions(self, t: float):
        boxes = {a.id: vehicle_box(a.x, a.y, a.heading, a.params.length, a.params.width)
                 for a in self.agents if a.alive}
        for o in self._active_obstacles(t):
            boxes[f"obstacle:{o.id}"] = rect_as_box(o.rect)
        pairs = detect_collisions(boxes)
        current = set(pairs)
        for pair in pairs:
            if pair not in self._colliding:
                rec = {"t": t, "pair": list(pair), "pos": [[boxes[i][0], boxes[i][1]] for i in pair]}
                self.collisions.append(_clean(rec))
                self.trace.emit("collision", **rec)
        self._colliding = current

    # -- decisions --

    def _snapshot(self, t: float) -> Snapshot:
        return Snapshot(t, tuple(Participant(a.id, a.spec.type, a.x, a.y, a.heading, a.state.speed,
                                             a.mode != "free", a.params.length, a.params.width)
                                 for a in self.agents if a.alive))

    def _peer_states(self, a: Agent) -> List[dict]:
        out = []
        for key, value, _ in a.replica.range("vehicles/"):
            if key.endswith("/state") and key != state_key(a.id):
                out.append(decode_record(value))
        return out

    def _publish(self, a: Agent, t: float):
        if sample_loss(self.net, self.rng_net):
            return
        st = a.state
        rec = {"t": t, "x": a.x, "y": a.y, "heading": a.heading, "speed": st.speed, "s": st.s,
               "path": a.spec.path_id, "phase": st.phase.value}
        self.store.put(state_key(a.id), encode_record(_clean(rec)), a.id)

    def _decide(self, a: Agent, t: float):
        st = a.state
        gaps = self._obstacle_gaps(a, t) + self._leader_gaps(a)
        if a.mode == "free":
            a.directive = plan_free(a, gaps)
            return
        try:
            self._publish(a, t)
            peers = self._peer_states(a)
            staleness = max((t - p["t"] for p in peers), default=0.0)
            self.max_staleness = max(self.max_staleness, staleness)
            if a.tracker is not None:
                self._perceive(a, t, peers)
            if a.mode == "lease":
                self._lease_logic(a, t)
                lease = a.lease or None
            else:
                lease = self._lock_logic(a, t)
        except StoreUnavailable:
            self.trace.emit("directive", t=t, id=a.id, reason=a.directive.reason.value,
                            v_target=a.directive.v_target, store="unavailable")
            return
        cruise = self.sched.v_advised if a.mode == "lock" else None
        d = plan_speed(st, lease, self.model, a.params, gaps, t, self.sched.v_advised,
                       DECISION_TICKS * DT, cruise)
        a.directive = d
        self.trace.emit("directive", t=t, id=a.id, reason=d.reason.value, v_target=d.v_target,
                        s=st.s, v=st.speed, phase=st.phase.value, staleness=staleness,
                        lease=[lease[0].t_start, lease[0].t_end] if lease else None)

    def _lease_logic(self, a: Agent, t: float):
        st, c = a.state, a.client
        leases, _ = c.view()
        a.lease = c.mine(leases)
        try:
            if st.phase is Phase.PLANNING:
                blocked = self._blocked(a, t)
                path = self.model.path(a.spec.path_id)
                if a.lease:
                    feas = check_feasibility(st, a.params, a.lease[0], self.model, t, self.sched.v_advised,
                                             self.sched.grace, blocked)
                    if feas is Feasibility.INFEASIBLE:
                        cancel_leases(c, a.lease, "cancelled")
                        a.lease = []
                    elif not blocked:
                        occ = estimate_occupancy(st, a.params, path, self.model, t, self.sched.v_advised,
                                                 self.sched.margin)
                        moved = try_bring_forward(c, a.lease, occ)
                        if moved:
                            a.lease = moved
                if not a.lease and not blocked:
                    occ = estimate_occupancy(st, a.params, path, self.model, t, self.sched.v_advised,
                                             self.sched.margin)
                    a.lease = apply_for_lease(c, occ)
            elif st.phase is Phase.CROSSING:
                if a.lease:
                    _, exit_s = self.model.occupancy_span(a.spec.path_id, a.params.length)
                    pred = t + arrival_time(exit_s - st.s, st.speed, self.sched.v_advised, a.params.a_max,
                                            -a.params.a_min)
                    ext = extend_if_expiring(c, a.lease, t, pred if math.isfinite(pred) else None)
                    if ext:
                        a.lease = ext
            elif not a.released:
                if a.lease:
                    cancel_leases(c, a.lease, "released")
                a.lease = []
                a.released = True
        except LeaseRetryError as exc:
            self.trace.emit("lease-event", t=t, event="retry-exhausted", agent=a.id, message=str(exc))
            a.lease = c.mine(c.view(linearizable=True)[0])

    def _lock_logic(self, a: Agent, t: float):
        st = a.state
        if st.phase is Phase.POST_CROSSING:
            if a.holds_lock:
                self._lock_cas(a, release=True)
                a.holds_lock = False
            return None
        if not a.holds_lock and st.phase is Phase.PLANNING:
            line = self.model.stop_line_s(a.spec.path_id, a.params.length)
            at_line = line - st.s <= LOCK_REQUEST_DISTANCE and st.speed < LOCK_REQUEST_SPEED
            if at_line or a.lock_queued or self.sched.lock_request == "approach":
                a.holds_lock = self._lock_cas(a, release=False)
                a.lock_queued = not a.holds_lock
        if a.holds_lock:
            return [Lease("lock", a.id, "lock", a.spec.path_id, t, t + 1e6)]
        return None

    def _lock_cas(self, a: Agent, release: bool) -> bool:
        for _ in range(self.sched.max_retries + 8):
            e = self.store.get(LOCK_KEY)
            lock = LockState.from_record(decode_record(e.value)) if e else LockState()
            version = e.version if e else 0
            before = lock.to_record()
            if release:
                lock_release(a.id, lock)
                granted = False
            else:
                granted = lock_acquire(a.id, lock)
            if lock.to_record() == before:
                return granted
            res = self.store.compare_and_swap(LOCK_KEY, version, encode_record(lock.to_record()), a.id)
            if res.ok:
                a.replica.apply(LOCK_KEY, "put", res.version, encode_record(lock.to_record()), self.store.now)
                self.trace.emit("lease-event", t=self.store.now, event="lock-release" if release else
                                ("lock-acquired" if granted else "lock-queued"), agent=a.id, leases=[])
                return granted
        raise LeaseRetryError(f"{a.id}: lock CAS retry budget exhausted")

    def _perceive(self, a: Agent, t: float, peers: List[dict]):
        obstacles = [rect_as_box(o.rect) for o in self._active_obstacles(t)]
        fused = perceive(self._snapshot(t), (a.x, a.y, a.heading), a.id, self.sensor, a.rng, a.tracker,
                         self.sc.occluders, obstacles)
        self.store.put(surrounding_key(a.id), encode_record(_clean({"t": t, "objects": [f.to_record() for f in fused]})), a.id)
        if a.client is None:
            return
        seen = set()
        for f in fused:
            if f.class_label == "car" and self._is_v2v(f, peers, t):
                continue
            path_id, window = self._proxy_window(f, t)
            if path_id is None:
                continue
            seen.add(f.object_key)
            if proxy_lease_for_non_v2v(a.client, f.object_key, path_id, window, t) or f.object_key in a.proxies:
                a.proxies[f.object_key] = t
            elif any(l.lease_id == f"proxy-{f.object_key}" and l.owner_id == a.id for l in a.client.view()[0]):
                a.proxies[f.object_key] = t
        for key, last in list(a.proxies.items()):
            if key in seen:
                continue
            if t - last > PROXY_LOST_AFTER or key in self._passed:
                cancel_proxy(a.client, key)
                del a.proxies[key]

    def _is_v2v(self, f, peers, t) -> bool:
        for p in peers:
            age = t - p["t"]
            px = p["x"] + p["speed"] * age * math.cos(p["heading"])
            py = p["y"] + p["speed"] * age * math.sin(p["heading"])
            if math.hypot(px - f.world_pos[0], py - f.world_pos[1]) < V2V_MATCH_RADIUS:
                return True
        return False

    def _proxy_window(self, f, t):
        vx, vy = f.world_vel
        speed = math.hypot(vx, vy)
        if speed < 0.1:
            return None, None
        vh = math.atan2(vy, vx)
        best = None
        length = 0.425 if f.class_label == "car" else 0.3
        for pid in sorted(self.model.paths):
            path = self.model.paths[pid]
            s_p, lat, h = path.project(*f.world_pos)
            if abs(lat) > 0.2 or abs(_wrap(vh - h)) > math.radians(35):
                continue
            enter_s, exit_s = self.model.occupancy_span(pid, length)
            if s_p >= exit_s:
                self._passed.add(f.object_key)
                continue
            key = (-len(path.block_spans), -(exit_s - enter_s), pid)
            if best is None or key < best[0]:
                best = (key, pid, s_p, enter_s, exit_s)
        if best is None:
            return None, None
        _, pid, s_p, enter_s, exit_s = best
        self._passed.discard(f.object_key)
        window = predict_constant_speed(enter_s - s_p, exit_s - enter_s, speed, t, self.sched.margin,
                                        self.sched.proxy_lead)
        return pid, window

    # -- main loop --

    def run(self) -> RunResult:
        self._passed = set()
        self.trace.emit("header", scenario=self.sc.name, seed=self.sc.seed, algorithm=self.sc.algorithm,
                        dt=DT, duration=self.sc.duration, no_v2v=list(self.sc.no_v2v),
                        vehicles=[a.id for a in self.agents])
        spawn_tick = {a.id: int(math.ceil(a.spec.spawn_time / DT - 1e-9)) for a in self.agents}
        order = sorted(self.agents, key=lambda a: a.id)
        last_tick = 0
        try:
            for k in range(self.n_ticks + 1):
                t = k * DT
                last_tick = k
                self.store.now = t
                if k > 0:
                    self._physics(t)
                for a in self.agents:
                    if a.state is None and spawn_tick[a.id] == k:
                        self._spawn(a, t)
                self._collisions(t)
                for a in order:
                    if a.replica is not None and a.alive:
                        a.replica.sync(t)
                for a in order:
                    if a.alive and k % DECISION_TICKS == a.index % DECISION_TICKS:
                        self._decide(a, t)
                alive = [a for a in self.agents if a.alive]
                if alive:
                    self.trace.emit("tick-state", t=t, vehicles=[[a.id, round(a.state.s, 4), round(a.state.speed, 4),
                                                                   round(a.x, 4), round(a.y, 4), a.state.phase.value]
                                                                  for a in alive])
                if all(a.finished for a in self.agents) and all(spawn_tick[a.id] <= k for a in self.agents):
                    break
        except InvariantViolation as exc:
            self.abort = str(exc)
        metrics = self._metrics(last_tick * DT)
        self.trace.emit("summary", **{k: v for k, v in metrics.items() if k != "vehicles"})
        return RunResult(metrics, self.trace.lines if self.trace.enabled else None, self.store.log,
                         self.lease_events)

    def _metrics(self, t_end: float) -> dict:
        per = {}
        for a in self.agents:
            per[a.id] = {
                "spawn": a.spawned_at,
                "post_crossing": a.post_at,
                "crossing_time": None if a.post_at is None or a.spawned_at is None else a.post_at - a.spawned_at,
                "stops": a.stops,
                "energy": a.energy,
                "mode": a.mode,
            }
        spawns = [a.spawned_at for a in self.agents if a.spawned_at is not None]
        posts = [a.post_at for a in self.agents if a.post_at is not None]
        complete = bool(self.agents) and all(a.post_at is not None for a in self.agents)
        if not self.agents:
            total = 0.0
        elif complete:
            total = max(posts) - min(spawns)
        else:
            total = None
        counts: Dict[str, int] = {}
        for ev in self.lease_events:
            counts[ev["event"]] = counts.get(ev["event"], 0) + 1
        return _clean({
            "scenario": self.sc.name,
            "seed": self.sc.seed,
            "algorithm": self.sc.algorithm,
            "no_v2v": list(self.sc.no_v2v),
            "sim_time": t_end,
            "complete": complete,
            "total_completion_time": total,
            "vehicles": per,
            "collisions": self.collisions,
            "n_collisions": len(self.collisions),
            "lease_events": dict(sorted(counts.items())),
            "max_staleness": self.max_staleness,
            "staleness_bound": staleness_bound(self.net),
            "violations": self.violations,
            "aborted": self.abort,
            "store_ops": len(self.store.log),
        })


_PHASE_ORDER = {Phase.PLANNING: 0, Phase.CROSSING: 1, Phase.POST_CROSSING: 2}


def plan_free(a: Agent, gaps: Sequence[float]) -> PlanDirective:
    """Uncoordinated driving: hold the cruise speed, stop only for things in the lane."""
    if gaps and min(gaps) <= stopping_distance(a.state.speed, a.params.a_min) + 0.1:
        return PlanDirective(0.0, Reason.EMERGENCY_STOP, brake_decel=-a.params.a_min)
    return PlanDirective(min(a.cruise, a.params.v_max), Reason.NO_LEASE_CRUISE)


def run(scenario, seed: Optional[int] = None, algorithm: Optional[str] = None, trace: bool = True,
        debug_invariants: bool = False, no_v2v: Optional[Iterable[str]] = None) -> RunResult:
    sc = load_scenario(scenario)
    kw = {}
    if seed is not None:
        kw["seed"] = int(seed)
    if algorithm is not None:
        kw["algorithm"] = algorithm
    if no_v2v is not None:
        kw["no_v2v"] = tuple(no_v2v)
    if kw:
        sc = sc.with_overrides(**kw)
    return Simulation(sc, trace=trace, debug_invariants=debug_invariants).run()


# -- audits ----------------------------------------------------------------------------

def audit_lease_log(log: Iterable[dict], model: IntersectionModel) -> List[dict]:
    """Replay the store log and check lease non-overlap after every commit."""
    leases: Dict[str, Lease] = {}
    bad = []
    for rec in log:
        if not rec.get("ok"):
            continue
        subs = rec["ops"] if rec["op"] == "txn" else [rec]
        touched = False
        for sub in subs:
            key = sub["key"]
            if "/leases/" not in key:
                continue
            touched = True
            if sub["op"] in ("put", "cas"):
                leases[key] = Lease.from_record(json.loads(sub["value"]))
            else:
                leases.pop(key, None)
        if touched:
            for a, b in audit_non_overlap(leases.values(), model):
                bad.append({"revision": rec["revision"], "t": rec["t"], "pair": [a.lease_id, b.lease_id],
                            "block": a.block_id})
    return bad


def staleness_audit(trace_records: Iterable[dict]) -> float:
    return max((r.get("staleness") or 0.0 for r in trace_records if r.get("kind") == "directive"), default=0.0)


# -- comparisons ----------------------------------------------------------------------

def _arm(args):
    sc, seed, algo = args
    r = run(sc, seed=seed, algorithm=algo, trace=False)
    return r.metrics["total_completion_time"], r.metrics["n_collisions"], r.metrics["complete"]


def compare_algorithms(scenario, seeds: Sequence[int], workers: int = 1) -> dict:
    """Run both arms on every seed; report mean completion times and their ratio."""
    sc = load_scenario(scenario)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    jobs = [(sc, s, algo) for s in seeds for algo in ALGORITHMS]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_arm, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_arm(j) for j in jobs]
    rows = []
    for i, s in enumerate(seeds):
        (lt, lc, lok), (kt, kc, kok) = results[2 * i], results[2 * i + 1]
        rows.append({"seed": s, "lease_time": lt, "lock_time": kt,
                     "ratio": lt / kt if lt is not None and kt else None,
                     "lease_collisions": lc, "lock_collisions": kc, "complete": bool(lok and kok)})
    lease_t = [r["lease_time"] for r in rows if r["lease_time"] is not None]
    lock_t = [r["lock_time"] for r in rows if r["lock_time"] is not None]
    mean_lease = float(np.mean(lease_t)) if lease_t else None
    mean_lock = float(np.mean(lock_t)) if lock_t else None
    return _clean({
        "scenario": sc.name,
        "seeds": seeds,
        "rows": rows,
        "mean_lease": mean_lease,
        "mean_lock": mean_lock,
        "ratio": mean_lease / mean_lock if mean_lease is not None and mean_lock else None,
        "lease_collisions": sum(r["lease_collisions"] for r in rows),
        "lock_collisions": sum(r["lock_collisions"] for r in rows),
        "flagged": [r["seed"] for r in rows if r["lease_collisions"] or r["lock_collisions"]],
        "all_complete": all(r["complete"] for r in rows),
    })
