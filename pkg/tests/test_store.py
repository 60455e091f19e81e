import random

import pytest

from oracles import random_store_schedule
from leasesim.store import (LOCK_KEY, SEQ_KEY, AccessError, CoordinationStore, Replica, StoreUnavailable, authorized,
                            decode_record, encode_record, replay_log, state_key)


def test_versions_count_up_per_key():
    s = CoordinationStore()
    assert s.put("vehicles/A/state", b"1", "A") == 1
    assert s.put("vehicles/A/state", b"2", "A") == 2
    assert s.put(SEQ_KEY, b"x", "A") == 1
    assert s.revision == 3


def test_cas_and_txn():
    s = CoordinationStore()
    assert s.compare_and_swap(LOCK_KEY, 0, b"a", "A").ok
    r = s.compare_and_swap(LOCK_KEY, 0, b"b", "B")
    assert not r.ok and r.version == 1
    bad = s.txn([(SEQ_KEY, 3)], [("put", SEQ_KEY, b"x")], "A")
    assert not bad.ok and bad.versions == {SEQ_KEY: 0}
    good = s.txn([(SEQ_KEY, 0)], [("put", SEQ_KEY, b"x"), ("put", "intersection/leases/main/A.1", b"l")], "A")
    assert good.ok
    assert s.get("intersection/leases/main/A.1").value == b"l"


def test_ownership():
    assert authorized(state_key("A"), "A")
    assert not authorized(state_key("A"), "B")
    s = CoordinationStore()
    with pytest.raises(AccessError):
        s.put(state_key("A"), b"x", "B")


def test_outage():
    s = CoordinationStore(outages=[(1.0, 2.0)])
    s.now = 1.5
    with pytest.raises(StoreUnavailable):
        s.get(SEQ_KEY)
    s.now = 2.0
    assert s.get(SEQ_KEY) is None


def test_watch_latency_and_order():
    s = CoordinationStore(latency_fn=lambda sub: 0.05)
    w = s.watch("vehicles/", "B")
    s.now = 0.0
    s.put(state_key("A"), b"1", "A")
    s.now = 0.01
    s.put(state_key("A"), b"2", "A")
    assert w.poll(0.04) == []
    evs = w.poll(0.06)
    assert [e.value for e in evs] == [b"1", b"2"]


def test_replica_starts_from_snapshot_and_ignores_old_versions():
    s = CoordinationStore()
    s.put(state_key("A"), b"1", "A")
    r = Replica(s, "B")
    assert r.get(state_key("A")) == (b"1", 1)
    s.put(state_key("A"), b"2", "A")
    r.sync(0.0)
    assert r.version(state_key("A")) == 2
    r.apply(state_key("A"), "put", 1, b"old", 0.0)
    assert r.get(state_key("A")) == (b"2", 2)


def test_record_roundtrip():
    rec = {"b": 1, "a": [1.5, None]}
    assert decode_record(encode_record(rec)) == rec


@pytest.mark.parametrize("seed", range(50))
def test_serial_replay_reproduces_state(seed):
    s = random_store_schedule(random.Random(seed))
    assert replay_log(s.log) == s.snapshot()


def test_replicas_converge():
    rng = random.Random(7)
    s = CoordinationStore(latency_fn=lambda sub: rng.uniform(0.0, 0.05))
    reps = [Replica(s, w) for w in "XYZ"]
    for i in range(100):
        s.now = i * 0.01
        s.put(f"vehicles/{'AB'[i % 2]}/state", str(i).encode(), "AB"[i % 2])
        if i % 7 == 0:
            s.delete("vehicles/A/state", "A")
    for r in reps:
        r.sync(10.0)
        assert {k: (v, ver) for k, v, ver in r.range("")} == s.snapshot()
