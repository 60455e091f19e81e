import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_earliest_slot_ms, random_lease_set
from leasesim.dynamics import Phase, VehicleParams, VehicleState
from leasesim.geometry import build_model, paths_conflict
from leasesim.scheduler import (Feasibility, Lease, LeaseClient, LeaseKind, LockState, ProtocolError,
                                SchedulerParams, apply_for_lease, arrival_time, audit_non_overlap, cancel_leases,
                                check_feasibility, earliest_slot, estimate_occupancy, extend_if_expiring,
                                find_conflicts, lock_acquire, lock_release, proxy_lease_for_non_v2v,
                                try_bring_forward)
from leasesim.store import CoordinationStore, Replica

MODEL = build_model()
GRID = build_model({"layout": "four_way", "grid": 2})


def client(store, vid, path, model=MODEL, replica=False, **kw):
    rep = Replica(store, vid) if replica else None
    return LeaseClient(vid, path, store, model, SchedulerParams(**kw), rep)


@pytest.mark.parametrize("seed", range(200))
def test_earliest_slot_matches_brute_force(seed):
    rng = random.Random(seed)
    leases = random_lease_set(rng, MODEL)
    path = rng.choice(sorted(MODEL.paths))
    dur = rng.randint(1, 2500)
    nb = rng.randint(0, 15_000)
    got = earliest_slot(dur / 1000.0, nb / 1000.0, leases, path, "main", MODEL)
    intervals = [(round(l.t_start * 1000), round(l.t_end * 1000)) for l in leases
                 if paths_conflict(l.path_id, path, MODEL)]
    want = brute_earliest_slot_ms(dur, nb, intervals)
    assert got[0] == pytest.approx(want / 1000.0, abs=1e-9)


def test_find_conflicts_half_open():
    a = Lease("a", "A", "main", "eb_straight", 1.0, 2.0)
    assert find_conflicts((2.0, 3.0), "nb_straight", "main", [a], MODEL) == []
    assert find_conflicts((1.9, 3.0), "nb_straight", "main", [a], MODEL) == [a]
    with pytest.raises(ValueError):
        find_conflicts((2.0, 2.0), "nb_straight", "main", [a], MODEL)


def test_second_applicant_is_postponed():
    s = CoordinationStore()
    a, b = client(s, "A", "eb_straight"), client(s, "B", "nb_straight")
    la = apply_for_lease(a, (1.0, 2.5))
    lb = apply_for_lease(b, (1.2, 2.7))
    assert lb[0].t_start == pytest.approx(la[0].t_end)
    assert lb[0].duration == pytest.approx(1.5)


def test_multi_block_lease_shares_window():
    s = CoordinationStore()
    c = client(s, "A", "eb_straight", model=GRID)
    ls = apply_for_lease(c, (1.0, 2.0))
    assert len(ls) == 2 and len({(l.t_start, l.t_end) for l in ls}) == 1


def test_stale_replica_retries_against_authority():
    s = CoordinationStore(latency_fn=lambda sub: 1.0)
    a = client(s, "A", "eb_straight", replica=True)
    b = client(s, "B", "nb_straight", replica=True)
    apply_for_lease(a, (1.0, 2.0))
    lb = apply_for_lease(b, (1.0, 2.0))  # B's replica has not seen A yet
    assert lb[0].t_start == pytest.approx(2.0)
    assert audit_non_overlap([Lease.from_record(__import__("json").loads(e.value)) for e in
                              s.range_read("intersection/leases/")], MODEL) == []


def test_extension_skipped_when_exit_is_on_time():
    s = CoordinationStore()
    a = client(s, "A", "eb_straight")
    la = apply_for_lease(a, (1.0, 2.0))
    assert extend_if_expiring(a, la, 1.8, predicted_exit=1.85) is None
    assert extend_if_expiring(a, la, 1.5, predicted_exit=2.5) is None  # not yet inside the threshold


def test_extension_pushes_conflicting_lease_back():
    s = CoordinationStore()
    a, b = client(s, "A", "eb_straight"), client(s, "B", "nb_straight")
    la = apply_for_lease(a, (1.0, 2.0))
    apply_for_lease(b, (2.0, 3.0))
    ext = extend_if_expiring(a, la, 1.8, predicted_exit=2.4)
    assert ext[0].t_end == pytest.approx(3.0)
    lb = b.mine(b.view(linearizable=True)[0])
    assert lb[0].t_start >= 3.0 - 1e-9
    assert audit_non_overlap(a.view(linearizable=True)[0], MODEL) == []


def test_extension_stops_at_proxy():
    s = CoordinationStore()
    a, obs = client(s, "A", "eb_straight"), client(s, "C", "sb_straight")
    la = apply_for_lease(a, (1.0, 2.0))
    proxy_lease_for_non_v2v(obs, "N", "nb_straight", (2.3, 3.0), 0.0)
    ext = extend_if_expiring(a, la, 1.9, predicted_exit=2.6)
    assert ext[0].t_end == pytest.approx(2.3)


def test_proxy_race_has_one_winner():
    s = CoordinationStore()
    c1, c2 = client(s, "A", "eb_straight"), client(s, "B", "wb_straight")
    r1 = proxy_lease_for_non_v2v(c1, "N", "nb_straight", (1.0, 2.0), 0.0)
    r2 = proxy_lease_for_non_v2v(c2, "N", "nb_straight", (1.05, 2.05), 0.0)
    assert r1 is not None and r2 is None
    owners = {l.owner_id for l in c1.view(linearizable=True)[0] if l.kind is LeaseKind.PROXY}
    assert owners == {"A"}


def test_proxy_postpones_v2v():
    s = CoordinationStore()
    a, obs = client(s, "A", "eb_straight"), client(s, "B", "sb_straight")
    apply_for_lease(a, (1.0, 2.0))
    proxy_lease_for_non_v2v(obs, "N", "nb_straight", (0.5, 1.5), 0.0)
    la = a.mine(a.view(linearizable=True)[0])
    assert la[0].t_start == pytest.approx(1.5)


def test_bring_forward_after_release():
    s = CoordinationStore()
    a, b = client(s, "A", "eb_straight"), client(s, "B", "nb_straight")
    la = apply_for_lease(a, (1.0, 2.0))
    lb = apply_for_lease(b, (1.0, 2.0))
    cancel_leases(a, la, "released")
    moved = try_bring_forward(b, lb, (1.2, 2.2))
    assert moved[0].t_start == pytest.approx(1.2)
    assert try_bring_forward(b, moved, (1.3, 2.3)) is None


def test_feasibility():
    p = VehicleParams()
    veh = VehicleState("A", "eb_straight", 0.6, 0.9)
    lease = Lease("A.1", "A", "main", "eb_straight", 1.1, 3.0)
    assert check_feasibility(veh, p, lease, MODEL, 0.0) is Feasibility.FEASIBLE
    assert check_feasibility(veh, p, lease, MODEL, 0.0, blocked=True) is Feasibility.INFEASIBLE
    assert check_feasibility(veh, p, lease, MODEL, 3.0) is Feasibility.INFEASIBLE
    stopped = VehicleState("A", "eb_straight", 0.6, 0.0)
    assert check_feasibility(stopped, p, lease, MODEL, 0.5) is Feasibility.INFEASIBLE


def test_occupancy_estimate():
    veh = VehicleState("A", "eb_straight", 0.6, 0.9)
    t0, t1 = estimate_occupancy(veh, VehicleParams(), MODEL.path("eb_straight"), MODEL, 0.0)
    assert t0 == pytest.approx((1.5875 - 0.6) / 0.9)
    assert t1 - t0 == pytest.approx(1.2 * 1.325 / 0.9)


def arrival_oracle(d, v0, vc, a_acc, a_dec, dt=1e-5):
    t, s, v = 0.0, 0.0, v0
    while s < d:
        dv = a_acc * dt if v < vc else -a_dec * dt if v > vc else 0.0
        nv = min(v + dv, vc) if v < vc else max(v + dv, vc)
        s += 0.5 * (v + nv) * dt
        v = nv
        t += dt
    return t


@pytest.mark.parametrize("d,v0,vc", [(1.0, 0.0, 0.9), (0.2, 0.0, 0.9), (1.0, 1.4, 0.9), (0.1, 1.4, 0.5),
                                     (2.0, 0.9, 0.9)])
def test_arrival_time_oracle(d, v0, vc):
    assert arrival_time(d, v0, vc, 1.0, 2.0) == pytest.approx(arrival_oracle(d, v0, vc, 1.0, 2.0), abs=1e-3)


def test_lock_fifo():
    lock = LockState()
    assert lock_acquire("A", lock)
    assert not lock_acquire("B", lock)
    assert not lock_acquire("C", lock)
    assert not lock_acquire("B", lock)
    assert lock.fifo_queue == ["B", "C"]
    lock_release("A", lock)
    assert lock.holder == "B"
    with pytest.raises(ProtocolError):
        lock_release("A", lock)


def test_lease_validation():
    with pytest.raises(ValueError):
        Lease("x", "A", "main", "eb_straight", 2.0, 2.0)


ops = st.lists(st.tuples(st.sampled_from(["apply", "cancel", "extend", "forward", "proxy"]),
                         st.integers(0, 3), st.floats(0.0, 10.0), st.floats(0.3, 2.0)), max_size=25)


@settings(max_examples=150, deadline=None)
@given(ops, st.floats(0.0, 0.3))
def test_random_protocol_runs_never_overlap(script, latency):
    """Stale replicas, retries and extensions never produce overlapping leases."""
    store = CoordinationStore(latency_fn=lambda sub: latency)
    paths = ["eb_straight", "nb_left", "wb_straight", "sb_right"]
    clients = [client(store, f"V{i}", paths[i], model=GRID, replica=True) for i in range(4)]
    now = 0.0
    for op, who, t, dur in script:
        now += 0.05
        store.now = now
        for c in clients:
            c.replica.sync(now)
        c = clients[who]
        mine = c.mine(c.view(linearizable=True)[0])
        try:
            if op == "apply" and not mine:
                apply_for_lease(c, (now + t, now + t + dur))
            elif op == "cancel" and mine:
                cancel_leases(c, mine)
            elif op == "extend" and mine:
                extend_if_expiring(c, mine, mine[0].t_end - 0.1, mine[0].t_end + dur)
            elif op == "forward" and mine:
                try_bring_forward(c, mine, (now, now + mine[0].duration))
            elif op == "proxy":
                proxy_lease_for_non_v2v(c, f"N{who}", paths[(who + 1) % 4], (now + t, now + t + dur), now)
        except Exception as exc:  # retry exhaustion is allowed, unsafe state is not
            assert "retry" in str(exc)
        assert audit_non_overlap(c.view(linearizable=True)[0], GRID) == []
