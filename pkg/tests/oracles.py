"""Independent reference implementations used by several test modules."""

import random

from leasesim.scheduler import Lease, LeaseKind
from leasesim.store import AccessError, CoordinationStore


def brute_earliest_slot_ms(duration_ms, not_before_ms, intervals_ms):
    """Scan start times 1 ms apart until a window clears every interval."""
    t = not_before_ms
    while True:
        if all(not (a < t + duration_ms and t < b) for a, b in intervals_ms):
            return t
        t += 1


def random_lease_set(rng: random.Random, model, n=None):
    paths = sorted(model.paths)
    leases = []
    for i in range(rng.randint(0, 8) if n is None else n):
        a = rng.randint(0, 20_000)
        b = a + rng.randint(1, 3_000)
        leases.append(Lease(f"L{i}", f"v{i}", "main", rng.choice(paths), a / 1000.0, b / 1000.0,
                            rng.choice([LeaseKind.V2V, LeaseKind.PROXY])))
    return leases


def random_store_schedule(rng: random.Random, n_ops=40):
    """Drive a store with random puts/CAS/deletes/txns; return it."""
    store = CoordinationStore()
    writers = ["A", "B", "C"]
    keys = ["intersection/seq", "intersection/leases/main/x", "intersection/leases/main/y",
            "vehicles/A/state", "vehicles/B/state"]
    for i in range(n_ops):
        store.now = i * 0.01
        w = rng.choice(writers)
        k = rng.choice(keys)
        val = f"{w}-{i}".encode()
        op = rng.random()
        try:
            if op < 0.3:
                store.put(k, val, w)
            elif op < 0.5:
                e = store.get(k)
                expected = (e.version if e else 0) if rng.random() < 0.7 else rng.randint(0, 5)
                store.compare_and_swap(k, expected, val, w)
            elif op < 0.65:
                store.delete(k, w)
            else:
                e = store.get("intersection/seq")
                seq_v = (e.version if e else 0) if rng.random() < 0.7 else rng.randint(0, 5)
                ops = [("put", "intersection/seq", val)]
                for kk in rng.sample(keys[1:3], rng.randint(0, 2)):
                    ops.append(("put", kk, val) if rng.random() < 0.6 else ("delete", kk))
                store.txn([("intersection/seq", seq_v)], ops, w)
        except AccessError:
            pass
    return store
