"""Enforcement: turn phase + lease state into a target speed.

Rule precedence (first match wins):

1. EmergencyStop   - something blocks the path within stopping distance + buffer
2. Crossing        - PreemptedHold if the lease was pushed into the future, else CrossAdvised
3. PostCrossing    - PostCrossAdvised
4. Planning + lease    - MeetLease, paced to reach the block at ``t_start``
5. Planning, no lease  - StopAtLine when the stop line is within reach, else NoLeaseCruise

Every Planning directive also carries a *gate*: an arc-length the vehicle may
pass only inside ``[open_from, open_until)``.  The engine enforces the gate
each physics tick, between the (slower) planning decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

from .dynamics import Phase, VehicleParams, VehicleState
from .geometry import IntersectionModel
from .scheduler import Lease

EMERGENCY_BUFFER = 0.1
STOP_LINE_BUFFER = 0.02
GATE_CLEARANCE = 0.002
# planned ramps use part of a_max so the lagging motor can keep up
RAMP_FRACTION = 0.6
INF = math.inf


class Reason(str, Enum):
    NO_LEASE_CRUISE = "NoLeaseCruise"
    MEET_LEASE = "MeetLease"
    STOP_AT_LINE = "StopAtLine"
    CROSS_ADVISED = "CrossAdvised"
    POST_CROSS_ADVISED = "PostCrossAdvised"
    EMERGENCY_STOP = "EmergencyStop"
    PREEMPTED_HOLD = "PreemptedHold"


@dataclass(frozen=True)
class PlanDirective:
    v_target: float
    reason: Reason
    brake_decel: Optional[float] = None
    gate_s: Optional[float] = None
    open_from: float = INF
    open_until: float = INF

    def gate_open(self, t: float) -> bool:
        return self.open_from <= t < self.open_until


def stopping_distance(v: float, a_min: float) -> float:
    if v < 0:
        raise ValueError("speed must be non-negative")
    if a_min >= 0:
        raise ValueError("a_min must be negative")
    return v * v / (2.0 * -a_min)


def _profile(v0: float, hold: float, T: float, v_adv: float, a_up: float, a_down: float):
    """Phase durations and distance of: change speed v0 -> hold, cruise, ramp hold -> v_adv."""
    t1 = abs(hold - v0) / (a_up if hold > v0 else a_down)
    t3 = (v_adv - hold) / a_up
    t2 = T - t1 - t3
    if t2 < -1e-12:
        return None
    t2 = max(t2, 0.0)
    return t1, t2, t3, 0.5 * (v0 + hold) * t1 + hold * t2 + 0.5 * (hold + v_adv) * t3


def pace(distance: float, time_left: float, v_advised: float, a_max: float, v_max: float,
         v_now: float = 0.0, lookahead: float = 0.0, a_down: Optional[float] = None) -> float:
    """Speed to command so the vehicle reaches ``distance`` at ``time_left``
    moving at ``v_advised``.

    The plan changes speed from ``v_now`` to a hold speed (at ``a_down`` or
    ``a_max``), holds it, then ramps to ``v_advised`` at ``a_max``; the hold
    speed is found by bisection.  The returned value is the plan's speed
    ``lookahead`` seconds from now, so a lagging motor starts changes early.
    If even standing still would arrive early the result is 0; if the vehicle
    cannot make it in time it gets ``v_advised`` (or the average speed
    needed, if higher).
    """
    if time_left <= 0:
        return v_advised
    T = time_left
    if distance >= v_advised * T:
        return min(v_max, distance / T)
    a_down = a_max if a_down is None else a_down
    v0 = min(max(v_now, 0.0), v_max)
    top = _profile(v0, v_advised, T, v_advised, a_up=a_max, a_down=a_down)
    if top is None:
        # cannot reach v_advised in time: go flat out only if that is not early
        t_up = (v_advised - v0) / a_max
        d_max = v0 * T + 0.5 * a_max * T * T if T <= t_up else \
            0.5 * (v0 + v_advised) * t_up + v_advised * (T - t_up)
        return min(v_max, max(v_advised, distance / T)) if distance >= d_max - 1e-9 else 0.0
    if distance >= top[3]:
        return min(v_max, max(v_advised, distance / T))
    # slowest hold speed whose profile still fits in T
    if v0 <= v_advised:
        lo = (v0 / a_down + v_advised / a_max - T) / (1.0 / a_down + 1.0 / a_max)
        lo = min(max(lo, 0.0), v0)
    else:
        lo = 0.0 if _profile(v0, 0.0, T, v_advised, a_max, a_down) else v_advised
    prof = _profile(v0, lo, T, v_advised, a_max, a_down)
    while prof is None and lo < v_advised:
        lo = min(v_advised, lo + 1e-3)
        prof = _profile(v0, lo, T, v_advised, a_max, a_down)
    hold = lo
    if prof[3] < distance:
        hi = v_advised
        for _ in range(60):
            mid = 0.5 * (hold + hi)
            pm = _profile(v0, mid, T, v_advised, a_max, a_down)
            if pm is None or pm[3] > distance:
                hi = mid
            else:
                hold, prof = mid, pm
    elif hold <= 0.0 or prof[3] > distance + 1e-9:
        # early even on the slowest plan that still ends at v_advised: wait
        return 0.0
    t1, t2, _, _ = prof
    tau = lookahead
    if tau < t1:
        v = v0 + (hold - v0) * tau / t1
    elif tau < t1 + t2:
        v = hold
    else:
        v = hold + a_max * (tau - t1 - t2)
    return min(v_max, max(0.0, min(v, v_advised)))


def _heads(lease: Union[None, Lease, Sequence[Lease]]) -> Optional[Lease]:
    if lease is None:
        return None
    if isinstance(lease, Lease):
        return lease
    lease = list(lease)
    return lease[0] if lease else None


def plan_speed(vehicle: VehicleState, lease, model: IntersectionModel, params: VehicleParams,
               obstacles: Iterable[float], now: float, v_advised: float = 0.9,
               decision_period: float = 0.1, cruise_speed: Optional[float] = None) -> PlanDirective:
    """Target speed for the next decision interval.

    ``obstacles`` are free gaps (m) from the vehicle's front to blocking
    objects ahead on its path.  ``cruise_speed`` overrides the lease-less
    cruise target, which otherwise holds the current speed.
    """
    v = vehicle.speed
    gaps = list(obstacles)
    if gaps and min(gaps) <= stopping_distance(v, params.a_min) + EMERGENCY_BUFFER:
        return PlanDirective(0.0, Reason.EMERGENCY_STOP, brake_decel=-params.a_min)

    head = _heads(lease)
    if vehicle.phase is Phase.CROSSING:
        if head is not None and head.t_start > now + 1e-9:
            return PlanDirective(0.0, Reason.PREEMPTED_HOLD, brake_decel=-params.a_min)
        return PlanDirective(min(v_advised, params.v_max), Reason.CROSS_ADVISED)
    if vehicle.phase is Phase.POST_CROSSING:
        return PlanDirective(min(v_advised, params.v_max), Reason.POST_CROSS_ADVISED)

    enter_s, _ = model.occupancy_span(vehicle.path_id, params.length)
    if head is not None:
        v_t = pace(enter_s - vehicle.s, head.t_start - now, v_advised, RAMP_FRACTION * params.a_max,
                   params.v_max, v, lookahead=params.motor_lag_tau + decision_period / 2.0,
                   a_down=-0.5 * params.a_min)
        return PlanDirective(min(max(v_t, 0.0), params.v_max), Reason.MEET_LEASE,
                             gate_s=enter_s, open_from=head.t_start, open_until=head.t_end)

    line = enter_s - model.stop_line_offset
    if vehicle.s >= line:
        # already past the line: hold short of the block itself
        decel = min(-params.a_min, v * v / (2.0 * max(enter_s - vehicle.s, 1e-6))) if v > 0 else None
        return PlanDirective(0.0, Reason.STOP_AT_LINE, brake_decel=decel, gate_s=enter_s)
    d = line - vehicle.s
    reach = stopping_distance(v, params.a_min) + v * decision_period + STOP_LINE_BUFFER
    if d <= reach:
        decel = min(-params.a_min, v * v / (2.0 * max(d, 1e-6))) if v > 0 else None
        return PlanDirective(0.0, Reason.STOP_AT_LINE, brake_decel=decel, gate_s=line)
    target = v if cruise_speed is None else cruise_speed
    return PlanDirective(min(max(target, 0.0), params.v_max), Reason.NO_LEASE_CRUISE, gate_s=line)


def gate_brake(s: float, v: float, directive: PlanDirective, t_next: float, a_min: float, dt: float) -> Optional[float]:
    """Deceleration needed this tick to stay behind a gate until it opens, or None.

    Brakes only as hard as needed to reach the gate no earlier than
    ``open_from``.  Once the vehicle can no longer stop before the gate it is
    let through (stopping inside the conflict zone would be worse).
    """
    if directive.gate_s is None or directive.gate_open(t_next) or v <= 0:
        return None
    gap = directive.gate_s - GATE_CLEARANCE - s
    if gap <= 0:
        return None
    if gap > stopping_distance(v, a_min) + v * dt + 0.005:
        return None
    wait = directive.open_from - t_next
    if gap >= v * wait:
        return None
    stop = v * v / (2.0 * gap)
    slow = 2.0 * (v * wait - gap) / (wait * wait) if math.isfinite(wait) and wait > 0 else math.inf
    need = slow if slow * wait <= v else stop
    if need > -a_min * 1.5:
        return None
    return min(max(need, 0.05), -a_min)
