"""Time-to-collision between axis-aligned vehicle boxes.

TTC is the time until two boxes moving at constant velocity first overlap.
Overlap is strict: boxes that only touch do not count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_CAP = 10.0


@dataclass(frozen=True)
class VehicleState:
    s: float
    lane_offset: float
    v: float
    v_lat: float = 0.0
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("vehicle box dimensions must be positive")
        if not np.isfinite(self.v):
            raise ValueError("vehicle speed must be finite")

    def as_row(self) -> tuple[float, ...]:
        return (self.s, self.lane_offset, self.v, self.v_lat, self.length, self.width)


def _axis_window(gap, rate, half):
    """Open interval of times where ``|gap + rate * t| < half``."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t1 = (-half - gap) / rate
        t2 = (half - gap) / rate
    enter = np.minimum(t1, t2)
    leave = np.maximum(t1, t2)
    still = rate == 0
    inside = np.abs(gap) < half
    enter = np.where(still, np.where(inside, -np.inf, np.inf), enter)
    leave = np.where(still, np.where(inside, np.inf, -np.inf), leave)
    return enter, leave


def ttc_arrays(s0, y0, v0, w0, len0, wid0, s1, y1, v1, w1, len1, wid1, cap=DEFAULT_CAP):
    """Vectorised TTC; every argument broadcasts. Returns values in [0, cap]."""
    ds = np.asarray(s1, dtype=float) - s0
    dy = np.asarray(y1, dtype=float) - y0
    rs = np.asarray(v1, dtype=float) - v0
    ry = np.asarray(w1, dtype=float) - w0
    hs = 0.5 * (np.asarray(len0, dtype=float) + len1)
    hy = 0.5 * (np.asarray(wid0, dtype=float) + wid1)
    a_in, a_out = _axis_window(ds, rs, hs)
    b_in, b_out = _axis_window(dy, ry, hy)
    enter = np.maximum(np.maximum(a_in, b_in), 0.0)
    leave = np.minimum(a_out, b_out)
    hit = enter < leave
    return np.where(hit, np.minimum(enter, cap), cap)


def instantaneous_ttc(ego: VehicleState, other: VehicleState, cap: float = DEFAULT_CAP) -> float:
    """TTC of two boxes propagated at constant velocity; 0 if they already overlap."""
    return float(ttc_arrays(*ego.as_row(), *other.as_row(), cap=cap))


def ttc_by_stepping(ego: VehicleState, other: VehicleState, cap: float = DEFAULT_CAP,
                    dt: float = 1e-3) -> float:
    """Reference TTC: march both boxes forward in small steps until they overlap."""
    n = int(round(cap / dt))
    t = np.arange(n + 1) * dt
    ds = (other.s + other.v * t) - (ego.s + ego.v * t)
    dy = (other.lane_offset + other.v_lat * t) - (ego.lane_offset + ego.v_lat * t)
    over = (np.abs(ds) < 0.5 * (ego.length + other.length)) & \
        (np.abs(dy) < 0.5 * (ego.width + other.width))
    hits = np.flatnonzero(over)
    return float(t[hits[0]]) if hits.size else cap
