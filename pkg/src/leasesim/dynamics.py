"""Longitudinal vehicle model: feedforward + PI speed control over a lagged motor.

The duty cycle sent to the motor is

    duty = k_ff * v_target + k_p * e + k_i * sum(e * dt),   e = v_target - v_current

and the simulated motor drives the speed toward ``duty / k_ff`` with a
first-order lag, slew-limited by the acceleration bounds.  Position comes
from integrating the speed (odometry), there is no absolute positioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

ANTI_WINDUP = 0.5
# integrate only near the target; large errors are slew-limited by the plant
INTEGRAL_BAND = 0.05
STOP_SNAP = 1e-3


class Phase(str, Enum):
    PLANNING = "Planning"
    CROSSING = "Crossing"
    POST_CROSSING = "PostCrossing"


@dataclass(frozen=True)
class VehicleParams:
    k_ff: float = 0.1
    k_p: float = 0.15
    k_i: float = 0.05
    v_max: float = 1.5
    a_max: float = 1.0
    a_min: float = -2.0
    motor_lag_tau: float = 0.3
    length: float = 0.425
    width: float = 0.192

    def __post_init__(self):
        if not self.k_ff > 0:
            raise ValueError("k_ff must be positive")
        if not (self.a_min < 0 < self.a_max):
            raise ValueError("need a_min < 0 < a_max")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")
        if not self.motor_lag_tau > 0:
            raise ValueError("motor_lag_tau must be positive")
        if self.k_p < 0 or self.k_i < 0:
            raise ValueError("gains must be non-negative")

    def with_overrides(self, overrides: Optional[dict]) -> "VehicleParams":
        return replace(self, **overrides) if overrides else self


@dataclass(frozen=True)
class MotorState:
    v_current: float = 0.0
    integral_error: float = 0.0
    odometer_s: float = 0.0
    duty_cycle: float = 0.0


@dataclass
class VehicleState:
    id: str
    path_id: str
    s: float
    speed: float
    phase: Phase = Phase.PLANNING
    is_v2v: bool = True
    motor: MotorState = field(default_factory=MotorState)


def _check_finite(*values):
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite input: {v!r}")


def controller_step(params: VehicleParams, motor: MotorState, v_target: float, dt: float) -> Tuple[MotorState, float]:
    """One PI update.  Returns the new motor state and the clamped duty cycle."""
    _check_finite(v_target, dt, motor.v_current, motor.integral_error)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if v_target < 0:
        raise ValueError("v_target must be non-negative")
    err = v_target - motor.v_current
    integral = motor.integral_error
    if abs(err) < INTEGRAL_BAND:
        integral += err * dt
    if params.k_i > 0:
        bound = ANTI_WINDUP / params.k_i
        integral = min(max(integral, -bound), bound)
    duty = params.k_ff * v_target + params.k_p * err + params.k_i * integral
    duty = min(max(duty, 0.0), 1.0)
    return replace(motor, integral_error=integral, duty_cycle=duty), duty


def plant_step(params: VehicleParams, motor: MotorState, duty_cycle: float, dt: float,
               brake_decel: Optional[float] = None) -> MotorState:
    """Advance the simulated motor by ``dt``.

    Without braking the speed relaxes toward ``duty_cycle / k_ff`` (exact
    first-order discretisation), limited to ``[a_min*dt, a_max*dt]`` per step.
    ``brake_decel`` (positive, m/s^2, at most ``|a_min|``) overrides the motor
    and decelerates at that rate.  The odometer uses the trapezoid rule.
    """
    _check_finite(duty_cycle, dt, motor.v_current)
    if not 0.0 <= duty_cycle <= 1.0:
        raise ValueError("duty_cycle must be in [0, 1]")
    v0 = motor.v_current
    if brake_decel is not None:
        decel = min(abs(brake_decel), -params.a_min)
        v1 = max(0.0, v0 - decel * dt)
        integral = 0.0
    else:
        v_cmd = duty_cycle / params.k_ff
        dv = (v_cmd - v0) * (1.0 - math.exp(-dt / params.motor_lag_tau))
        dv = min(max(dv, params.a_min * dt), params.a_max * dt)
        v1 = v0 + dv
        if v_cmd == 0.0 and v1 < STOP_SNAP:
            v1 = 0.0
        integral = motor.integral_error
    v1 = min(max(v1, 0.0), params.v_max)
    return replace(motor, v_current=v1, integral_error=integral,
                   odometer_s=motor.odometer_s + 0.5 * (v0 + v1) * dt)


def localize(motor: MotorState, initial_s: float) -> float:
    """Position along the path from the hard-coded start plus integrated distance."""
    return initial_s + motor.odometer_s


def step_response(params: VehicleParams, v_target: float, duration: float, dt: float = 0.01,
                  feedback: bool = True, v0: float = 0.0) -> List[float]:
    """Speed trace of a closed-loop step to ``v_target``.

    With ``feedback=False`` the proportional and integral gains are zeroed,
    leaving the plain feedforward map.
    """
    p = params if feedback else replace(params, k_p=0.0, k_i=0.0)
    motor = MotorState(v_current=v0, duty_cycle=p.k_ff * v0)
    trace = [motor.v_current]
    for _ in range(int(round(duration / dt))):
        motor, duty = controller_step(p, motor, v_target, dt)
        motor = plant_step(p, motor, duty, dt)
        trace.append(motor.v_current)
    return trace


def settling_time(trace: List[float], target: float, dt: float, band: float = 0.05) -> float:
    """First time after which the trace stays within ``band * |target|`` of target."""
    tol = band * abs(target) if target else band
    last_out = -1
    for i, v in enumerate(trace):
        if abs(v - target) > tol:
            last_out = i
    if last_out == len(trace) - 1:
        return math.inf
    return (last_out + 1) * dt
