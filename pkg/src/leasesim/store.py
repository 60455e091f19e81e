"""Simulated linearizable key-value store with versioned CAS and delayed watches.

A single authority commits every operation immediately, in call order;
only watch delivery is delayed.  Keys follow the schema

    vehicles/<id>/state
    vehicles/<id>/surrounding
    intersection/<block_id>/leases/<lease_id>
    intersection/seq, intersection/lock

A vehicle may write only its own ``vehicles/<id>/`` subtree; the
``intersection/`` tree is shared.  Each key carries a revision counter that
increments on every put and delete, so versions keep growing across
delete/recreate cycles; a CAS with ``expected_version=0`` means "key absent".
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

SYSTEM = "*"
_DELIVERY_EPS = 1e-9


class AccessError(PermissionError):
    pass


class StoreUnavailable(RuntimeError):
    pass


def encode_record(record: dict) -> bytes:
    """Canonical byte encoding: sorted keys, compact separators."""
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode()


def decode_record(value: bytes) -> dict:
    return json.loads(value)


def state_key(vehicle_id: str) -> str:
    return f"vehicles/{vehicle_id}/state"


def surrounding_key(vehicle_id: str) -> str:
    return f"vehicles/{vehicle_id}/surrounding"


def lease_prefix(block_id: str) -> str:
    return f"intersection/{block_id}/leases/"


def lease_key(block_id: str, lease_id: str) -> str:
    return lease_prefix(block_id) + lease_id


SEQ_KEY = "intersection/seq"
LOCK_KEY = "intersection/lock"


def authorized(key: str, writer_id: str) -> bool:
    if writer_id == SYSTEM:
        return True
    parts = key.split("/")
    if parts[0] == "vehicles":
        return len(parts) >= 3 and parts[1] == writer_id
    return parts[0] == "intersection"


@dataclass(frozen=True)
class StoreEntry:
    key: str
    value: bytes
    version: int
    mod_time: float


@dataclass(frozen=True)
class WatchEvent:
    key: str
    kind: str  # "put" | "delete"
    version: int
    value: Optional[bytes]
    revision: int
    commit_time: float
    delivery_time: float


@dataclass(frozen=True)
class CasResult:
    ok: bool
    version: int


@dataclass(frozen=True)
class TxnResult:
    ok: bool
    versions: Dict[str, int]


class Watch:
    """Per-subscriber event queue; events surface once their delivery time passes."""

    def __init__(self, prefix: str, subscriber_id: str):
        self.prefix = prefix
        self.subscriber_id = subscriber_id
        self._queue: deque = deque()
        self.last_delivery = float("-inf")
        self.delivered = 0

    def _push(self, ev: WatchEvent):
        self._queue.append(ev)
        self.last_delivery = ev.delivery_time

    def poll(self, now: float) -> List[WatchEvent]:
        out = []
        while self._queue and self._queue[0].delivery_time <= now + _DELIVERY_EPS:
            out.append(self._queue.popleft())
        self.delivered += len(out)
        return out

    def pending(self) -> int:
        return len(self._queue)


class CoordinationStore:
    def __init__(self, latency_fn: Optional[Callable[[str], float]] = None,
                 outages: Sequence[Tuple[float, float]] = ()):
        self.now = 0.0
        self._latency_fn = latency_fn or (lambda sub: 0.0)
        self._outages = [tuple(w) for w in outages]
        self._data: Dict[str, StoreEntry] = {}
        self._rev: Dict[str, int] = {}
        self.revision = 0
        self.log: List[dict] = []
        self._watches: List[Watch] = []
        self.listeners: List[Callable[[dict], None]] = []

    # -- internals ---------------------------------------------------------

    def _check_up(self):
        for t0, t1 in self._outages:
            if t0 <= self.now < t1:
                raise StoreUnavailable(f"store unavailable at t={self.now:.3f}")

    def _authorize(self, key: str, writer_id: str):
        if not authorized(key, writer_id):
            raise AccessError(f"{writer_id!r} may not write {key!r}")

    def _version(self, key: str) -> int:
        e = self._data.get(key)
        return e.version if e else 0

    def _apply(self, kind: str, key: str, value: Optional[bytes]) -> int:
        rev = self._rev.get(key, 0) + 1
        self._rev[key] = rev
        if kind == "put":
            self._data[key] = StoreEntry(key, value, rev, self.now)
        else:
            del self._data[key]
        return rev

    def _notify(self, changes: List[Tuple[str, str, int, Optional[bytes]]]):
        for w in self._watches:
            latency = None
            for key, kind, version, value in changes:
                if not key.startswith(w.prefix):
                    continue
                if latency is None:
                    latency = self._latency_fn(w.subscriber_id)
                delivery = max(self.now + latency, w.last_delivery)
                w._push(WatchEvent(key, kind, version, value, self.revision, self.now, delivery))

    def _record(self, rec: dict):
        rec["t"] = self.now
        rec["revision"] = self.revision
        self.log.append(rec)
        for fn in self.listeners:
            fn(rec)

    # -- public API ----------------------------------------------------------

    def get(self, key: str) -> Optional[StoreEntry]:
        self._check_up()
        return self._data.get(key)

    def range_read(self, prefix: str) -> List[StoreEntry]:
        """All entries under ``prefix``, sorted by key, at one linearization point."""
        self._check_up()
        return [self._data[k] for k in sorted(self._data) if k.startswith(prefix)]

    def put(self, key: str, value: bytes, writer_id: str) -> int:
        self._check_up()
        self._authorize(key, writer_id)
        self.revision += 1
        v = self._apply("put", key, value)
        self._record({"op": "put", "key": key, "writer": writer_id, "ok": True, "version": v,
                      "value": value.decode()})
        self._notify([(key, "put", v, value)])
        return v

    def compare_and_swap(self, key: str, expected_version: int, value: bytes, writer_id: str) -> CasResult:
        self._check_up()
        self._authorize(key, writer_id)
        current = self._version(key)
        if current != expected_version:
            self._record({"op": "cas", "key": key, "writer": writer_id, "ok": False,
                          "expected": expected_version, "version": current})
            return CasResult(False, current)
        self.revision += 1
        v = self._apply("put", key, value)
        self._record({"op": "cas", "key": key, "writer": writer_id, "ok": True,
                      "expected": expected_version, "version": v, "value": value.decode()})
        self._notify([(key, "put", v, value)])
        return CasResult(True, v)

    def delete(self, key: str, writer_id: str) -> bool:
        self._check_up()
        self._authorize(key, writer_id)
        if key not in self._data:
            self._record({"op": "delete", "key": key, "writer": writer_id, "ok": False})
            return False
        self.revision += 1
        v = self._apply("delete", key, None)
        self._record({"op": "delete", "key": key, "writer": writer_id, "ok": True, "version": v})
        self._notify([(key, "delete", v, None)])
        return True

    def txn(self, compares: Iterable[Tuple[str, int]], ops: Iterable[tuple], writer_id: str) -> TxnResult:
        """Atomically apply ``ops`` if every ``(key, expected_version)`` compare holds.

        ``ops`` are ``("put", key, value)`` or ``("delete", key)``.  A failed
        transaction returns the current versions of the compared keys.
        """
        self._check_up()
        compares = list(compares)
        ops = list(ops)
        for op in ops:
            self._authorize(op[1], writer_id)
        current = {k: self._version(k) for k, _ in compares}
        if any(current[k] != exp for k, exp in compares):
            self._record({"op": "txn", "writer": writer_id, "ok": False,
                          "compares": [[k, e] for k, e in compares], "versions": current})
            return TxnResult(False, current)
        self.revision += 1
        changes = []
        applied = []
        versions = {}
        for op in ops:
            if op[0] == "put":
                v = self._apply("put", op[1], op[2])
                changes.append((op[1], "put", v, op[2]))
                applied.append({"op": "put", "key": op[1], "version": v, "value": op[2].decode()})
            elif op[0] == "delete":
                if op[1] not in self._data:
                    continue
                v = self._apply("delete", op[1], None)
                changes.append((op[1], "delete", v, None))
                applied.append({"op": "delete", "key": op[1], "version": v})
            else:
                raise ValueError(f"unknown txn op {op[0]!r}")
            versions[op[1]] = v
        self._record({"op": "txn", "writer": writer_id, "ok": True,
                      "compares": [[k, e] for k, e in compares], "ops": applied})
        self._notify(changes)
        return TxnResult(True, versions)

    def watch(self, prefix: str, subscriber_id: str) -> Watch:
        w = Watch(prefix, subscriber_id)
        self._watches.append(w)
        return w

    def snapshot(self) -> Dict[str, Tuple[bytes, int]]:
        return {k: (e.value, e.version) for k, e in sorted(self._data.items())}


def replay_log(log: Iterable[dict]) -> Dict[str, Tuple[bytes, int]]:
    """Serially re-apply committed operations from an op log."""
    data: Dict[str, Tuple[bytes, int]] = {}
    for rec in log:
        if not rec.get("ok"):
            continue
        if rec["op"] in ("put", "cas"):
            data[rec["key"]] = (rec["value"].encode(), rec["version"])
        elif rec["op"] == "delete":
            data.pop(rec["key"], None)
        elif rec["op"] == "txn":
            for sub in rec["ops"]:
                if sub["op"] == "put":
                    data[sub["key"]] = (sub["value"].encode(), sub["version"])
                else:
                    data.pop(sub["key"], None)
    return dict(sorted(data.items()))


class Replica:
    """A client's eventually-consistent copy of the store, fed by one watch.

    The replica starts from a snapshot of the store.  The owner's own
    commits may be applied immediately (read-your-writes); the later watch
    echo is ignored because its version is not newer.  Watch events arrive
    in commit order, so a key's version here is only as fresh as the last
    delivered commit.
    """

    def __init__(self, store: CoordinationStore, owner_id: str, prefix: str = ""):
        self.owner_id = owner_id
        self._entries: Dict[str, Tuple[bytes, int, float]] = {}
        self._seen: Dict[str, int] = {}
        # initial snapshot and watch registration happen at the same instant
        for e in store.range_read(prefix):
            self.apply(e.key, "put", e.version, e.value, e.mod_time)
        self._watch = store.watch(prefix, owner_id)

    def apply(self, key: str, kind: str, version: int, value: Optional[bytes], t: float):
        if version <= self._seen.get(key, 0):
            return
        self._seen[key] = version
        if kind == "put":
            self._entries[key] = (value, version, t)
        else:
            self._entries.pop(key, None)

    def sync(self, now: float) -> int:
        events = self._watch.poll(now)
        for ev in events:
            self.apply(ev.key, ev.kind, ev.version, ev.value, ev.commit_time)
        return len(events)

    def range(self, prefix: str) -> List[Tuple[str, bytes, int]]:
        return [(k, self._entries[k][0], self._entries[k][1])
                for k in sorted(self._entries) if k.startswith(prefix)]

    def get(self, key: str) -> Optional[Tuple[bytes, int]]:
        e = self._entries.get(key)
        return (e[0], e[1]) if e else None

    def version(self, key: str) -> int:
        e = self._entries.get(key)
        return e[1] if e else 0
