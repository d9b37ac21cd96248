"""Temperature-scaled uncertainty calibration with label-free online
adaptation from verifier feedback.

Raw uncertainties pass through a sigmoid with temperature T before risk
propagation.  T itself is nudged every update interval: up when confident
problems keep failing (overconfidence), down when doubtful problems keep
passing (underconfidence).  Note that even at T=1 the map is not the
identity; it compresses [0, 1] into roughly [0.378, 0.622].
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .core import clamp_unit

TEMPERATURE_MIN = 0.5
TEMPERATURE_MAX = 2.0
TEMPERATURE_UP = 1.1
TEMPERATURE_DOWN = 0.9


@dataclass
class CalibrationState:
    """Temperature plus a bounded window of (raw uncertainty, pass) pairs."""

    temperature: float = 1.0
    capacity: int = 200
    update_interval: int = 20
    tau_low: float = 0.3
    tau_high: float = 0.7
    theta_acc: float = 0.7
    min_bucket: int = 5
    since_update: int = 0
    observations: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if not TEMPERATURE_MIN <= self.temperature <= TEMPERATURE_MAX:
            raise ValueError(
                f"temperature must lie in [{TEMPERATURE_MIN}, {TEMPERATURE_MAX}]")
        if self.capacity < 1 or self.update_interval < 1 or self.min_bucket < 1:
            raise ValueError("capacity, update interval and bucket minimum must be >= 1")
        self.observations = deque(self.observations, maxlen=self.capacity)


def calibrate(u: float, temperature: float) -> float:
    """Sigmoid temperature scaling of a raw uncertainty.

    Strictly increasing in u with a fixed point at 0.5; smaller
    temperatures sharpen the map, larger ones flatten it.
    """
    u = clamp_unit(u, "u")
    if not TEMPERATURE_MIN <= temperature <= TEMPERATURE_MAX:
        raise ValueError(
            f"temperature must lie in [{TEMPERATURE_MIN}, {TEMPERATURE_MAX}]")
    return 1.0 / (1.0 + math.exp(-(u - 0.5) / temperature))


def record_observation(state: CalibrationState, raw_u: float, passed: bool) -> CalibrationState:
    """Append a verifier outcome keyed by the raw (pre-calibration) uncertainty."""
    state.observations.append((clamp_unit(raw_u, "raw_u"), bool(passed)))
    state.since_update += 1
    return state


def _bucket_rate(state: CalibrationState, low: bool) -> float | None:
    if low:
        bucket = [p for u, p in state.observations if u < state.tau_low]
    else:
        bucket = [p for u, p in state.observations if u > state.tau_high]
    if len(bucket) < state.min_bucket:
        return None
    return sum(bucket) / len(bucket)


def maybe_update_temperature(state: CalibrationState) -> tuple[CalibrationState, bool]:
    """Apply the multiplicative temperature update once per interval.

    The overconfidence branch is checked first: missing a failure-prone
    regime costs more than extra exploration.  Buckets with fewer than
    ``min_bucket`` observations are ignored.  The temperature is clamped
    to its bounds and the interval counter resets whether or not a branch
    fired.
    """
    if state.since_update < state.update_interval:
        return state, False
    acc_low = _bucket_rate(state, low=True)
    acc_high = _bucket_rate(state, low=False)
    updated = False
    if acc_low is not None and acc_low < state.theta_acc:
        state.temperature *= TEMPERATURE_UP
        updated = True
    elif acc_high is not None and acc_high > state.theta_acc:
        state.temperature *= TEMPERATURE_DOWN
        updated = True
    state.temperature = min(max(state.temperature, TEMPERATURE_MIN), TEMPERATURE_MAX)
    state.since_update = 0
    return state, updated
