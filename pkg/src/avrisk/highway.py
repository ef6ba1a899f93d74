"""Deterministic kinematic highway rollouts scored by minimum TTC.

Scenario vectors are laid out as

    [P_g, A, C, P_a, S_0, T_0, V_0, ..., S_{n-1}, T_{n-1}, V_{n-1}, xi_0, ...]

with vehicle 0 the ego. The ego runs adaptive cruise plus lane keeping on a
noisy range measurement; the environment vehicles run an affine feedback
law whose gains are the first entries of the behaviour vector ``xi``.

The simulator is vectorised over a batch of scenarios. Only elementwise
arithmetic and min/max reductions are used inside the step loop, so the
result for a scenario does not depend on which other scenarios share its
batch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import TextIO

import numpy as np

from avrisk.ttc import ttc_arrays

N_WEATHER = 4
BEHAVIOR_FIELDS = ("acc_bias", "speed_gain", "gap_gain", "relvel_gain",
                   "lat_bias", "lat_gain", "ego_attract", "speed_offset")


@dataclass(frozen=True)
class SimConfig:
    n_vehicles: int = 6
    behavior_dim: int = 8
    road_length: float = 1000.0
    dt: float = 0.05
    horizon: float = 10.0
    ttc_cap: float = 10.0
    lane_width: float = 3.5
    # lane index of each environment vehicle relative to the ego lane
    env_lanes: tuple = (0, 1, -1, 0, 1)
    vehicle_length: float = 4.5
    vehicle_width: float = 1.8
    spawn_gap: float = 2.0
    spawn_headway: float = 1.0
    # ego controller
    headway: float = 1.5
    standstill_gap: float = 5.0
    max_decel: float = 6.0
    max_accel: float = 2.0
    k_speed: float = 0.4
    k_gap: float = 0.25
    k_relvel: float = 0.6
    aeb_ttc: float = 1.5
    lane_keep_gain: float = 0.8
    sensor_range: float = 120.0
    # range-sensing degradation from weather
    noise_base: float = 0.02
    noise_sun: float = 0.3
    noise_rain: float = 0.3
    noise_ground: float = 0.05
    rate_noise: float = 2.0
    miss_onset: float = 0.1
    miss_coeff: float = 1.5
    # track losses last whole blocks of frames
    miss_block: int = 10
    set_speed_offset: float = 3.0
    # environment controller limits
    env_max_decel: float = 8.0
    env_max_accel: float = 3.0
    max_lat_speed: float = 1.5
    attract_range: float = 40.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one step")
        if self.n_vehicles < 2:
            raise ValueError("need the ego and at least one other vehicle")
        if self.behavior_dim < len(BEHAVIOR_FIELDS):
            raise ValueError(f"behavior_dim must be >= {len(BEHAVIOR_FIELDS)}")
        if len(self.env_lanes) < self.n_vehicles - 1:
            raise ValueError("env_lanes needs one entry per environment vehicle")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def scenario_dim(self) -> int:
        return N_WEATHER + 3 * self.n_vehicles + self.behavior_dim

    def noise_off(self) -> "SimConfig":
        return self.replace(noise_base=0.0, noise_sun=0.0, noise_rain=0.0,
                            noise_ground=0.0, miss_coeff=0.0)

    def replace(self, **kw) -> "SimConfig":
        doc = asdict(self)
        doc.update(kw)
        return SimConfig(**doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        doc = dict(doc)
        if "env_lanes" in doc:
            doc["env_lanes"] = tuple(doc["env_lanes"])
        return cls(**doc)


@dataclass
class RolloutTrace:
    dt: float
    horizon: float
    # (n_frames, n_vehicles, 6): s, lane_offset, v, v_lat, length, width
    frames: np.ndarray
    frame_ttc: np.ndarray
    collided: bool
    min_ttc: float
    field_names: tuple = field(default=("s", "lane_offset", "v", "v_lat", "length", "width"))

    def write_jsonl(self, fh: TextIO) -> None:
        for k, frame in enumerate(self.frames):
            rec = {
                "frame": k,
                "t": k * self.dt,
                "min_ttc": float(self.frame_ttc[k]),
                "vehicles": [dict(zip(self.field_names, map(float, row))) for row in frame],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def summary(self) -> dict:
        return {"dt": self.dt, "horizon": self.horizon, "n_frames": len(self.frames),
                "collided": self.collided, "min_ttc": self.min_ttc}


def min_ttc(trace: RolloutTrace) -> float:
    if len(trace.frame_ttc) == 0:
        raise ValueError("empty trace")
    if trace.collided:
        return 0.0
    return float(np.min(trace.frame_ttc))


def scenario_seed(x: np.ndarray) -> int:
    digest = hashlib.blake2b(np.ascontiguousarray(x, dtype=np.float64).tobytes(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _sensor_noise(X: np.ndarray, n_frames: int, block: int) -> np.ndarray:
    """Per-scenario pseudo-noise keyed by the scenario bytes: (B, n_frames, 3)."""
    out = np.empty((X.shape[0], n_frames, 3))
    n_blocks = -(-n_frames // block)
    for b in range(X.shape[0]):
        rng = np.random.default_rng(scenario_seed(X[b]))
        out[b, :, :2] = rng.standard_normal((n_frames, 2))
        out[b, :, 2] = np.repeat(rng.random(n_blocks), block)[:n_frames]
    return out


def noise_scale(X: np.ndarray, cfg: SimConfig) -> np.ndarray:
    p_g, alt, cloud, p_air = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    sun = (alt / 90.0) * (1.0 - cloud / 100.0)
    return (cfg.noise_base + cfg.noise_sun * np.clip(sun, 0.0, 1.0)
            + cfg.noise_rain * (p_air / 100.0) + cfg.noise_ground * (p_g / 50.0))


def _spawn(X: np.ndarray, cfg: SimConfig):
    n = cfg.n_vehicles
    pose = X[:, N_WEATHER:N_WEATHER + 3 * n].reshape(-1, n, 3)
    lanes = np.array((0,) + tuple(cfg.env_lanes[:n - 1]), dtype=float) * cfg.lane_width
    s = pose[:, :, 0].copy()
    y = lanes + pose[:, :, 1]
    v = pose[:, :, 2].copy()
    # A vehicle spawning inside an earlier same-lane vehicle's clearance
    # (bumper gap plus time headway of whichever car trails) is pushed ahead.
    # Pushes only move cars forward, so repeated passes settle.
    base = cfg.vehicle_length + cfg.spawn_gap
    for _ in range(n * n):
        moved = False
        for i in range(1, n):
            for j in range(n):
                if j == i or lanes[i] != lanes[j] or (j > i and _ == 0):
                    continue
                rel = s[:, i] - s[:, j]
                ahead_need = base + cfg.spawn_headway * v[:, j]
                behind_need = base + cfg.spawn_headway * v[:, i]
                clash = (rel > -behind_need) & (rel < ahead_need)
                if clash.any():
                    s[:, i] = np.where(clash, s[:, j] + ahead_need, s[:, i])
                    moved = True
        if not moved:
            break
    return s, y, v, lanes


def simulate_batch(X, cfg: SimConfig, record: bool = False):
    """Roll out a batch of scenarios.

    Returns ``(min_ttc, collided, frames, frame_ttc)``; ``frames`` and
    ``frame_ttc`` are None unless ``record``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != cfg.scenario_dim:
        raise ValueError(f"scenario has {X.shape[1]} entries, config expects {cfg.scenario_dim}")
    B, n = X.shape[0], cfg.n_vehicles
    dt, cap = cfg.dt, cfg.ttc_cap
    L, W = cfg.vehicle_length, cfg.vehicle_width

    s, y, v, lane_y = _spawn(X, cfg)
    vlat = np.zeros((B, n))
    xi = X[:, N_WEATHER + 3 * n:]
    acc_bias, k_spd, k_gap, k_rel, lat_bias, lat_gain, attract, spd_off = \
        (xi[:, k:k + 1] for k in range(len(BEHAVIOR_FIELDS)))
    v_des = v[:, 1:] + spd_off
    v_set = v[:, 0] + cfg.set_speed_offset

    n_frames = cfg.n_steps + 1
    sigma = noise_scale(X, cfg)
    p_miss = np.clip(cfg.miss_coeff * (sigma - cfg.miss_onset), 0.0, 0.9)
    noisy = bool(np.any(sigma > 0) or np.any(p_miss > 0))
    eta = _sensor_noise(X, n_frames, cfg.miss_block) if noisy else np.zeros((B, n_frames, 3))
    if not noisy:
        eta[:, :, 2] = 1.0

    running = np.full(B, cap)
    collided = np.zeros(B, dtype=bool)
    alive = np.ones(B, dtype=bool)
    frames = np.empty((n_frames, n, 6)) if record else None
    frame_ttc = np.empty(n_frames) if record else None
    corridor = W + 0.5

    for k in range(n_frames):
        tt = ttc_arrays(s[:, :1], y[:, :1], v[:, :1], vlat[:, :1], L, W,
                        s[:, 1:], y[:, 1:], v[:, 1:], vlat[:, 1:], L, W, cap=cap)
        tmin = tt.min(axis=1)
        running = np.where(alive, np.minimum(running, tmin), running)
        hit = alive & (tmin == 0.0)
        collided |= hit
        alive &= ~hit
        if record:
            frames[k] = np.stack([s[0], y[0], v[0], vlat[0],
                                  np.full(n, L), np.full(n, W)], axis=1)
            frame_ttc[k] = tmin[0]
            if not alive[0]:
                frames, frame_ttc = frames[:k + 1], frame_ttc[:k + 1]
                break
        if k == n_frames - 1 or not alive.any():
            break

        # pairwise geometry: ds[b, i, j] = s_j - s_i
        ds = s[:, None, :] - s[:, :, None]
        dy = np.abs(y[:, None, :] - y[:, :, None])
        ahead = (ds > 0) & (dy < corridor)
        gap_all = np.where(ahead, ds - L, np.inf)
        lead = np.argmin(gap_all, axis=2)
        gap = np.take_along_axis(gap_all, lead[:, :, None], axis=2)[:, :, 0]
        v_lead = np.take_along_axis(np.broadcast_to(v[:, None, :], (B, n, n)),
                                    lead[:, :, None], axis=2)[:, :, 0]

        # ego: ACC on a degraded range measurement
        g0 = gap[:, 0]
        seen = np.isfinite(g0) & (g0 < cfg.sensor_range) & (eta[:, k, 2] >= p_miss)
        g_meas = np.where(seen, g0 * (1.0 + sigma * eta[:, k, 0]), np.inf)
        r_meas = np.where(seen, (v_lead[:, 0] - v[:, 0]) + cfg.rate_noise * sigma * eta[:, k, 1], 0.0)
        a_cruise = cfg.k_speed * (v_set - v[:, 0])
        a_follow = np.where(seen, cfg.k_gap * (g_meas - (cfg.standstill_gap + cfg.headway * v[:, 0]))
                            + cfg.k_relvel * r_meas, np.inf)
        a_ego = np.minimum(a_cruise, a_follow)
        with np.errstate(divide="ignore", invalid="ignore"):
            ttc_meas = np.where(seen & (r_meas < 0), g_meas / -r_meas, np.inf)
        a_ego = np.where(ttc_meas < cfg.aeb_ttc, -cfg.max_decel, a_ego)
        a_ego = np.clip(a_ego, -cfg.max_decel, cfg.max_accel)
        vl_ego = np.clip(-cfg.lane_keep_gain * y[:, 0], -1.0, 1.0)

        # environment: affine feedback with gains from xi
        ge = gap[:, 1:]
        has_lead = np.isfinite(ge) & (ge < 100.0)
        follow_err = np.where(has_lead, ge - (2.0 + 1.5 * v[:, 1:]), 0.0)
        closing = np.where(has_lead, v_lead[:, 1:] - v[:, 1:], 0.0)
        a_env = (acc_bias + k_spd * (v_des - v[:, 1:])
                 + k_gap * 0.2 * np.minimum(follow_err, 0.0)
                 + k_rel * np.minimum(closing, 0.0))
        a_env = np.clip(a_env, -cfg.env_max_decel, cfg.env_max_accel)
        near = np.abs(s[:, 1:] - s[:, :1]) < cfg.attract_range
        vl_env = (lat_bias + lat_gain * (y[:, 1:] - lane_y[1:])
                  + np.where(near, attract * (y[:, :1] - y[:, 1:]), 0.0))
        vl_env = np.clip(vl_env, -cfg.max_lat_speed, cfg.max_lat_speed)

        acc = np.concatenate([a_ego[:, None], a_env], axis=1)
        vl_new = np.concatenate([vl_ego[:, None], vl_env], axis=1)
        v_new = np.maximum(v + acc * dt, 0.0)
        live = alive[:, None]
        s = np.where(live, s + v_new * dt, s)
        y = np.where(live, y + vl_new * dt, y)
        v = np.where(live, v_new, v)
        vlat = np.where(live, vl_new, vlat)

    out = np.where(collided, 0.0, running)
    return out, collided, frames, frame_ttc


def simulate_highway(x, cfg: SimConfig) -> RolloutTrace:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("simulate_highway takes a single scenario vector")
    f, collided, frames, frame_ttc = simulate_batch(x[None, :], cfg, record=True)
    return RolloutTrace(dt=cfg.dt, horizon=cfg.horizon, frames=frames, frame_ttc=frame_ttc,
                        collided=bool(collided[0]), min_ttc=float(f[0]))
