"""Message budget, bandwidth and latency model of the V2V store synchronisation.

Sizes use decimal units (1 KB = 1000 B, 1 MB = 10**6 B).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Optional

import numpy as np

KB = 1000.0
MB = 1000.0 * KB

_Z90 = NormalDist().inv_cdf(0.9)


@dataclass(frozen=True)
class NetParams:
    msg_size: float = 4 * KB
    update_period: float = 0.1
    latency_mode: str = "fixed"  # fixed | lognormal | zero
    sync_latency: float = 0.0086  # fixed value, or the p90 in lognormal mode
    latency_sigma: float = 0.5
    capacity: float = 30 * MB
    loss_prob: float = 0.0
    overhead: float = 0.0

    def __post_init__(self):
        if not self.update_period > 0:
            raise ValueError("update_period must be positive")
        if not self.capacity > 0:
            raise ValueError("capacity must be positive")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")
        if self.latency_mode not in ("fixed", "lognormal", "zero"):
            raise ValueError(f"unknown latency mode {self.latency_mode!r}")
        if self.sync_latency < 0 or self.overhead < 0 or self.msg_size < 0:
            raise ValueError("negative network parameter")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "NetParams":
        return replace(cls(), **d) if d else cls()


def per_vehicle_rate(params: NetParams) -> float:
    return params.msg_size / params.update_period


def aggregate_bandwidth(n_vehicles: int, params: NetParams) -> float:
    """Bytes per second for ``n_vehicles`` periodic updaters, overhead included."""
    if n_vehicles < 0:
        raise ValueError("n_vehicles must be >= 0")
    return n_vehicles * per_vehicle_rate(params) * (1.0 + params.overhead)


def max_supported_vehicles(params: NetParams) -> int:
    """Largest fleet whose aggregate bandwidth fits in ``params.capacity``."""
    per = per_vehicle_rate(params) * (1.0 + params.overhead)
    if per <= 0:
        raise ValueError("zero per-vehicle rate: unbounded fleet")
    n = int(math.floor(params.capacity / per + 1e-9))
    while n > 0 and aggregate_bandwidth(n, params) > params.capacity * (1 + 1e-12):
        n -= 1
    return n


def lognormal_mu(params: NetParams) -> float:
    """Location parameter placing the 90th percentile at ``sync_latency``."""
    return math.log(params.sync_latency) - params.latency_sigma * _Z90


def sample_latency(params: NetParams, rng: np.random.Generator) -> float:
    if params.latency_mode == "zero" or params.sync_latency == 0:
        return 0.0
    if params.latency_mode == "fixed":
        return params.sync_latency
    return float(rng.lognormal(lognormal_mu(params), params.latency_sigma))


def sample_loss(params: NetParams, rng: np.random.Generator) -> bool:
    return params.loss_prob > 0 and bool(rng.random() < params.loss_prob)


def staleness_bound(params: NetParams) -> float:
    """Worst-case age of a peer's state record under fixed latency and no loss."""
    latency = 0.0 if params.latency_mode == "zero" else params.sync_latency
    return latency + params.update_period
