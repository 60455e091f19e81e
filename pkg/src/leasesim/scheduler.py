"""Lease lifecycle and the FIFO lock baseline.

A lease grants one participant the half-open window ``[t_start, t_end)`` on
one conflict block.  A vehicle whose path crosses several blocks holds one
lease per block, all sharing the same window.

Every mutation of the lease set is a single store transaction guarded by a
compare on ``intersection/seq``; the seq key is rewritten by every such
transaction.  A decision computed from a stale replica therefore fails its
compare and is retried against a linearizable read.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .dynamics import Phase, VehicleParams, VehicleState
from .geometry import IntersectionModel, Path, paths_conflict
from .store import (SEQ_KEY, CoordinationStore, Replica, decode_record, encode_record,
                    lease_key)

Window = Tuple[float, float]


class SchedulerError(RuntimeError):
    """Protocol misuse (wrong phase, double application, ...)."""


class LeaseRetryError(SchedulerError):
    """Registration lost the CAS race more often than the retry budget allows."""


class ProtocolError(SchedulerError):
    pass


class LeaseKind(str, Enum):
    V2V = "V2V"
    PROXY = "NonV2VProxy"


class LeaseStatus(str, Enum):
    ACTIVE = "Active"
    CANCELLED = "Cancelled"


class Feasibility(str, Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class Lease:
    lease_id: str
    holder_id: str
    block_id: str
    path_id: str
    t_start: float
    t_end: float
    kind: LeaseKind = LeaseKind.V2V
    status: LeaseStatus = LeaseStatus.ACTIVE
    owner_id: Optional[str] = None

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"lease {self.lease_id}: t_start must precede t_end")

    @property
    def key(self) -> str:
        return lease_key(self.block_id, self.lease_id)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def to_record(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["status"] = self.status.value
        return d

    def encode(self) -> bytes:
        return encode_record(self.to_record())

    @classmethod
    def from_record(cls, d: dict) -> "Lease":
        d = dict(d)
        d["kind"] = LeaseKind(d["kind"])
        d["status"] = LeaseStatus(d["status"])
        return cls(**d)

    def moved(self, t_start: float, t_end: float) -> "Lease":
        return replace(self, t_start=t_start, t_end=t_end)


@dataclass(frozen=True)
class Participant:
    id: str
    type: str
    x: float
    y: float
    heading: float
    speed: float
    is_v2v: bool = True
    length: float = 0.425
    width: float = 0.192


@dataclass(frozen=True)
class Snapshot:
    t: float
    participants: Tuple[Participant, ...] = ()

    def __post_init__(self):
        ids = [p.id for p in self.participants]
        if len(ids) != len(set(ids)):
            raise ValueError("participant ids must be unique within a snapshot")


@dataclass(frozen=True)
class SchedulerParams:
    v_advised: float = 0.9
    margin: float = 1.2
    extension_threshold: float = 0.3
    extension_quantum: float = 1.0
    extension_guard: float = 0.05
    grace: float = 0.2
    max_retries: int = 3
    bring_forward_min_gain: float = 0.05
    proxy_lead: float = 0.2
    proxy_refresh_tolerance: float = 0.05
    # lock baseline: "stop" asks for the lock at the stop line, "approach" asks while still moving
    lock_request: str = "stop"

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "SchedulerParams":
        return replace(cls(), **d) if d else cls()


# -- timing -----------------------------------------------------------------

def arrival_time(distance: float, v0: float, v_cruise: float, a_acc: float, a_dec: float) -> float:
    """Time to cover ``distance`` when ramping from ``v0`` to ``v_cruise`` (at
    ``a_acc`` up or ``a_dec`` down, both positive) and then holding it."""
    if distance <= 0:
        return 0.0
    if v_cruise <= 0 and v0 <= 0:
        return math.inf
    if v0 < v_cruise:
        ramp = (v_cruise ** 2 - v0 ** 2) / (2 * a_acc)
        if distance <= ramp:
            return (-v0 + math.sqrt(v0 * v0 + 2 * a_acc * distance)) / a_acc
        return (v_cruise - v0) / a_acc + (distance - ramp) / v_cruise
    if v0 > v_cruise:
        ramp = (v0 ** 2 - v_cruise ** 2) / (2 * a_dec)
        if distance <= ramp:
            return (v0 - math.sqrt(max(v0 * v0 - 2 * a_dec * distance, 0.0))) / a_dec
        if v_cruise <= 0:
            return math.inf
        return (v0 - v_cruise) / a_dec + (distance - ramp) / v_cruise
    return distance / v_cruise


def estimate_occupancy(vehicle: VehicleState, params: VehicleParams, path: Path, model: IntersectionModel,
                       now: float, v_advised: float = 0.9, margin: float = 1.2) -> Window:
    """Expected (entry, exit) times of the vehicle body over its path's blocks.

    Entry assumes accelerating at ``a_max`` to the advised speed; the
    crossing duration at the advised speed is inflated by ``margin``.
    """
    if margin < 1:
        raise ValueError("margin must be >= 1")
    enter_s, exit_s = model.occupancy_span(path.id, params.length)
    distance = enter_s - vehicle.s
    if vehicle.phase is not Phase.PLANNING or distance <= 0:
        raise SchedulerError(f"{vehicle.id}: occupancy estimate requires the Planning phase")
    t_enter = now + arrival_time(distance, vehicle.speed, v_advised, params.a_max, -params.a_min)
    return t_enter, t_enter + margin * (exit_s - enter_s) / v_advised


def predict_constant_speed(distance_to_enter: float, span: float, speed: float, now: float,
                           margin: float = 1.2, lead: float = 0.0) -> Optional[Window]:
    """Occupancy window of an uncontrolled participant holding its speed."""
    if speed <= 1e-3 or distance_to_enter + span <= 0:
        return None
    t_enter = now + max(distance_to_enter, 0.0) / speed
    remaining = span if distance_to_enter >= 0 else span + distance_to_enter
    return max(now, t_enter - lead), t_enter + margin * remaining / speed


# -- pure slot arithmetic ------------------------------------------------------

def find_conflicts(candidate: Window, path_id: str, block_id: str, leases: Iterable[Lease],
                   model: IntersectionModel) -> List[Lease]:
    """Active leases on ``block_id`` whose path conflicts and whose window
    intersects the candidate window (half-open)."""
    t0, t1 = candidate
    if not t0 < t1:
        raise ValueError("candidate window must have t_start < t_end")
    return [l for l in leases
            if l.status is LeaseStatus.ACTIVE and l.block_id == block_id
            and l.t_start < t1 and t0 < l.t_end
            and paths_conflict(l.path_id, path_id, model)]


def _blocking_intervals(existing, path_id, block_ids, model):
    out = []
    for l in existing:
        if l.status is LeaseStatus.ACTIVE and l.block_id in block_ids and paths_conflict(l.path_id, path_id, model):
            out.append((l.t_start, l.t_end))
    out.sort()
    return out


def earliest_slot(duration: float, not_before: float, existing: Iterable[Lease], path_id: str,
                  block_id, model: IntersectionModel) -> Window:
    """Smallest start >= ``not_before`` whose window of ``duration`` is free of
    conflicting leases.  ``block_id`` may be a single id or a collection of
    ids, in which case the window must be free on every block."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    blocks = {block_id} if isinstance(block_id, str) else set(block_id)
    intervals = _blocking_intervals(existing, path_id, blocks, model)
    t = not_before
    moved = True
    while moved:
        moved = False
        for a, b in intervals:
            if a < t + duration and t < b:
                t = b
                moved = True
    return t, t + duration


def stable_postpone(affected: Sequence[List[Lease]], fixed: List[Lease], not_before: float,
                    model: IntersectionModel) -> List[List[Lease]]:
    """Re-place lease groups (one group = one holder's per-block leases) at or
    after ``not_before`` keeping their relative order."""
    placed = list(fixed)
    out = []
    floor = not_before
    for group in sorted(affected, key=lambda g: (g[0].t_start, g[0].holder_id)):
        head = group[0]
        start, end = earliest_slot(head.duration, max(floor, head.t_start), placed, head.path_id,
                                   [l.block_id for l in group], model)
        new = [l.moved(start, end) for l in group]
        placed.extend(new)
        out.append(new)
        floor = start
    return out


def group_leases(leases: Iterable[Lease]) -> List[List[Lease]]:
    groups: Dict[Tuple[str, str], List[Lease]] = {}
    for l in leases:
        groups.setdefault((l.holder_id, l.lease_id), []).append(l)
    return [sorted(g, key=lambda l: l.block_id) for _, g in sorted(groups.items())]


def audit_non_overlap(leases: Iterable[Lease], model: IntersectionModel) -> List[Tuple[Lease, Lease]]:
    """Pairs of Active leases on a common block with conflicting paths and
    overlapping windows.  Two proxy leases never count: neither party can be
    rescheduled."""
    by_block: Dict[str, List[Lease]] = {}
    for l in leases:
        if l.status is LeaseStatus.ACTIVE:
            by_block.setdefault(l.block_id, []).append(l)
    bad = []
    for ls in by_block.values():
        ls.sort(key=lambda l: (l.t_start, l.lease_id))
        for i, a in enumerate(ls):
            for b in ls[i + 1:]:
                if b.t_start >= a.t_end:
                    continue
                if a.kind is LeaseKind.PROXY and b.kind is LeaseKind.PROXY:
                    continue
                if paths_conflict(a.path_id, b.path_id, model):
                    bad.append((a, b))
    return bad


# -- agent-side protocol ---------------------------------------------------------

class LeaseClient:
    """One participant's handle on the shared lease table.

    ``replica`` provides the (possibly stale) view used for first attempts;
    retries read the authority directly.
    """

    def __init__(self, agent_id: str, path_id: str, store: CoordinationStore, model: IntersectionModel,
                 params: SchedulerParams = SchedulerParams(), replica: Optional[Replica] = None,
                 emit: Optional[Callable[..., None]] = None):
        self.agent_id = agent_id
        self.path_id = path_id
        self.store = store
        self.model = model
        self.params = params
        self.replica = replica
        self._emit = emit
        self._counter = 0
        self.block_ids = model.path(path_id).blocks_in_order()

    def emit(self, kind: str, leases: Sequence[Lease], **extra):
        if self._emit is not None:
            self._emit(kind, self.agent_id, leases, **extra)

    def view(self, linearizable: bool = False) -> Tuple[List[Lease], int]:
        """All leases and the seq-key version they were read at."""
        if linearizable or self.replica is None:
            entries = [(e.key, e.value) for e in self.store.range_read("intersection/")]
            seq = self.store.get(SEQ_KEY)
            seq_v = seq.version if seq else 0
        else:
            entries = [(k, v) for k, v, _ in self.replica.range("intersection/")]
            seq_v = self.replica.version(SEQ_KEY)
        leases = [Lease.from_record(decode_record(v)) for k, v in entries if "/leases/" in k]
        return leases, seq_v

    def mine(self, leases: Iterable[Lease]) -> List[Lease]:
        return sorted((l for l in leases if l.holder_id == self.agent_id and l.kind is LeaseKind.V2V),
                      key=lambda l: l.block_id)

    def next_lease_id(self) -> str:
        self._counter += 1
        return f"{self.agent_id}.{self._counter}"

    def commit(self, seq_version: int, puts: Sequence[Lease] = (), deletes: Sequence[Lease] = (),
               extra_compares: Sequence[Tuple[str, int]] = ()) -> bool:
        ops = [("put", SEQ_KEY, encode_record({"by": self.agent_id, "t": self.store.now}))]
        ops += [("delete", l.key) for l in deletes]
        ops += [("put", l.key, l.encode()) for l in puts]
        res = self.store.txn([(SEQ_KEY, seq_version), *extra_compares], ops, self.agent_id)
        if res.ok and self.replica is not None:
            # own lease writes are visible at once; the seq key is left to the
            # watch so that matching it implies every earlier commit arrived
            for op in ops:
                v = res.versions.get(op[1])
                if v is None or op[1] == SEQ_KEY:
                    continue
                if op[0] == "put":
                    self.replica.apply(op[1], "put", v, op[2], self.store.now)
                else:
                    self.replica.apply(op[1], "delete", v, None, self.store.now)
        return res.ok

    def attempts(self):
        """Views for the retry loop: replica first, then linearizable reads."""
        for i in range(self.params.max_retries + 1):
            yield self.view(linearizable=i > 0)


def _others(leases, agent_id):
    return [l for l in leases if not (l.holder_id == agent_id and l.kind is LeaseKind.V2V)]


def apply_for_lease(agent: LeaseClient, occupancy: Window, store: Optional[CoordinationStore] = None) -> List[Lease]:
    """Register a lease at the earliest conflict-free slot not before the
    estimated entry.  Returns one lease per block the path crosses."""
    t_enter, t_exit = occupancy
    duration = t_exit - t_enter
    for leases, seq_v in agent.attempts():
        if agent.mine(leases):
            raise SchedulerError(f"{agent.agent_id} already holds a lease")
        start, end = earliest_slot(duration, t_enter, _others(leases, agent.agent_id), agent.path_id,
                                   agent.block_ids, agent.model)
        lease_id = agent.next_lease_id()
        new = [Lease(lease_id, agent.agent_id, b, agent.path_id, start, end) for b in agent.block_ids]
        if agent.commit(seq_v, puts=new):
            agent.emit("applied", new, requested=[t_enter, t_exit], postponed=start > t_enter + 1e-9)
            return new
    raise LeaseRetryError(f"{agent.agent_id}: lease registration retry budget exhausted")


def try_bring_forward(agent: LeaseClient, lease: Sequence[Lease], occupancy_now: Window) -> Optional[List[Lease]]:
    """Move the lease earlier if a slot opened up that the vehicle can still reach."""
    current = list(lease)
    head = current[0]
    achievable = occupancy_now[0]
    if achievable >= head.t_start:
        return None
    leases, seq_v = agent.view()
    start, end = earliest_slot(head.duration, achievable, _others(leases, agent.agent_id), agent.path_id,
                               agent.block_ids, agent.model)
    if start >= head.t_start - agent.params.bring_forward_min_gain:
        return None
    new = [l.moved(start, end) for l in current]
    if not agent.commit(seq_v, puts=new):
        return None
    agent.emit("brought-forward", new, previous=[head.t_start, head.t_end])
    return new


def check_feasibility(vehicle: VehicleState, params: VehicleParams, lease: Lease, model: IntersectionModel,
                      now: float, v_advised: float = 0.9, grace: float = 0.2, blocked: bool = False) -> Feasibility:
    """Infeasible when the lease has expired or the vehicle can no longer
    reach the block before ``t_start + grace``."""
    if now >= lease.t_end:
        return Feasibility.INFEASIBLE
    if blocked:
        achievable = math.inf
    else:
        enter_s, _ = model.occupancy_span(vehicle.path_id, params.length)
        achievable = now + arrival_time(enter_s - vehicle.s, vehicle.speed, v_advised, params.a_max, -params.a_min)
    return Feasibility.INFEASIBLE if achievable > lease.t_start + grace else Feasibility.FEASIBLE


def cancel_leases(agent: LeaseClient, lease: Sequence[Lease], reason: str = "cancelled") -> bool:
    """Delete the agent's leases (always lands: retried on fresh reads)."""
    keys = {l.key for l in lease}
    for leases, seq_v in agent.attempts():
        present = [l for l in leases if l.key in keys]
        if not present:
            return False
        if agent.commit(seq_v, deletes=present):
            agent.emit(reason, [replace(l, status=LeaseStatus.CANCELLED) for l in present])
            return True
    raise LeaseRetryError(f"{agent.agent_id}: cancellation retry budget exhausted")


def cancel_and_reapply(agent: LeaseClient, lease: Sequence[Lease], occupancy: Window) -> List[Lease]:
    cancel_leases(agent, lease, "cancelled")
    return apply_for_lease(agent, occupancy)


def extend_if_expiring(agent: LeaseClient, lease: Sequence[Lease], now: float,
                       predicted_exit: Optional[float] = None) -> Optional[List[Lease]]:
    """Extend a lease close to expiry, pushing conflicting V2V leases behind it.

    Triggers when fewer than ``extension_threshold`` seconds remain, unless
    ``predicted_exit`` shows the vehicle leaving before the lease ends (with
    ``extension_guard`` to spare).  The end moves by whole quanta until it
    covers the predicted exit, and never runs into a proxy lease, which
    cannot be moved.
    """
    p = agent.params
    head = list(lease)[0]
    remaining = head.t_end - now
    if remaining >= p.extension_threshold:
        return None
    if predicted_exit is not None and predicted_exit < head.t_end - p.extension_guard:
        return None
    for leases, seq_v in agent.attempts():
        mine = [l for l in agent.mine(leases) if l.lease_id == head.lease_id]
        if not mine:
            return None
        head = mine[0]
        target_end = head.t_end + p.extension_quantum
        if predicted_exit is not None:
            while target_end < predicted_exit + p.extension_guard:
                target_end += p.extension_quantum
        others = _others(leases, agent.agent_id)
        proxies = [l for l in others if l.kind is LeaseKind.PROXY and l.t_start >= head.t_end
                   and find_conflicts((head.t_end, target_end), agent.path_id, l.block_id, [l], agent.model)]
        if proxies:
            target_end = min(target_end, min(l.t_start for l in proxies))
        if target_end <= head.t_end + 1e-9:
            return None
        extended = [l.moved(l.t_start, target_end) for l in mine]
        hit = set()
        for b in agent.block_ids:
            for l in find_conflicts((head.t_end, target_end), agent.path_id, b, others, agent.model):
                if l.kind is LeaseKind.V2V:
                    hit.add((l.holder_id, l.lease_id))
        affected = [g for g in group_leases(others) if (g[0].holder_id, g[0].lease_id) in hit]
        affected_keys = {l.key for g in affected for l in g}
        fixed = [l for l in others if l.key not in affected_keys] + extended
        moved = stable_postpone(affected, fixed, target_end, agent.model)
        puts = [l for g in moved for l in g] + extended
        if agent.commit(seq_v, puts=puts):
            agent.emit("extended", extended, previous=[head.t_start, head.t_end])
            for g in moved:
                agent.emit("postponed", g, by=agent.agent_id)
            return extended
    return None


def release_after_exit(agent: LeaseClient, lease: Sequence[Lease]) -> bool:
    """Give the lease back once the vehicle has left; False if already gone."""
    return cancel_leases(agent, lease, "released")


def proxy_lease_for_non_v2v(agent: LeaseClient, observed_id: str, observed_path_id: str,
                            window: Optional[Window], now: float) -> Optional[List[Lease]]:
    """Register (or refresh) a priority lease on behalf of a non-V2V participant.

    The lease id is derived from the observed id, so concurrent observers
    race on the same keys and exactly one wins.  Conflicting V2V leases that
    overlap the proxy window are postponed behind it in the same commit.
    Returns the proxy leases written by this call, or None.
    """
    if window is None:
        return None
    t0, t1 = window
    lease_id = f"proxy-{observed_id}"
    blocks = agent.model.path(observed_path_id).blocks_in_order()
    for attempt, (leases, seq_v) in enumerate(agent.attempts()):
        existing = [l for l in leases if l.lease_id == lease_id]
        if existing:
            if existing[0].owner_id != agent.agent_id:
                return None
            cur = existing[0]
            if (abs(cur.t_start - t0) < agent.params.proxy_refresh_tolerance
                    and abs(cur.t_end - t1) < agent.params.proxy_refresh_tolerance
                    and cur.path_id == observed_path_id):
                return None
        proxy = [Lease(lease_id, observed_id, b, observed_path_id, t0, t1, LeaseKind.PROXY, owner_id=agent.agent_id)
                 for b in blocks]
        rest = [l for l in leases if l.lease_id != lease_id]
        hit = set()
        for b in blocks:
            for l in find_conflicts((t0, t1), observed_path_id, b, rest, agent.model):
                if l.kind is LeaseKind.V2V:
                    hit.add((l.holder_id, l.lease_id))
        affected = [g for g in group_leases(rest) if (g[0].holder_id, g[0].lease_id) in hit]
        affected_keys = {l.key for g in affected for l in g}
        fixed = [l for l in rest if l.key not in affected_keys] + proxy
        moved = stable_postpone(affected, fixed, t1, agent.model)
        stale = [l for l in existing if l.block_id not in blocks]
        compares = [(l.key, 0) for l in proxy] if not existing else []
        ok = agent.commit(seq_v, puts=[l for g in moved for l in g] + proxy, deletes=stale,
                          extra_compares=compares)
        if ok:
            agent.emit("proxy-created" if not existing else "proxy-refreshed", proxy, observer=agent.agent_id)
            for g in moved:
                agent.emit("postponed", g, by=agent.agent_id)
            return proxy
        if not existing and any(agent.store.get(l.key) for l in proxy):
            return None
    return None


def cancel_proxy(agent: LeaseClient, observed_id: str) -> bool:
    lease_id = f"proxy-{observed_id}"
    for leases, seq_v in agent.attempts():
        mine = [l for l in leases if l.lease_id == lease_id and l.owner_id == agent.agent_id]
        if not mine:
            return False
        if agent.commit(seq_v, deletes=mine):
            agent.emit("proxy-cancelled", [replace(l, status=LeaseStatus.CANCELLED) for l in mine])
            return True
    return False


# -- lock baseline ------------------------------------------------------------------

@dataclass
class LockState:
    holder: Optional[str] = None
    fifo_queue: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.holder is not None and self.holder in self.fifo_queue:
            raise ValueError("holder cannot also be queued")

    def to_record(self) -> dict:
        return {"holder": self.holder, "fifo_queue": list(self.fifo_queue)}

    @classmethod
    def from_record(cls, d: dict) -> "LockState":
        return cls(d.get("holder"), list(d.get("fifo_queue", [])))


def lock_acquire(agent_id: str, lock: LockState) -> bool:
    """Queue the agent (once) and grant the lock to the queue head if free."""
    if lock.holder == agent_id:
        return True
    if agent_id not in lock.fifo_queue:
        lock.fifo_queue.append(agent_id)
    if lock.holder is None and lock.fifo_queue[0] == agent_id:
        lock.holder = lock.fifo_queue.pop(0)
        return True
    return False


def lock_release(agent_id: str, lock: LockState) -> None:
    """Release and hand the lock to the next queued agent."""
    if lock.holder != agent_id:
        raise ProtocolError(f"{agent_id} released a lock held by {lock.holder}")
    lock.holder = lock.fifo_queue.pop(0) if lock.fifo_queue else None
