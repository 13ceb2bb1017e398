"""Longitudinal car-following environment with drowsiness-delayed actuation.

A point-mass ego vehicle follows a lead vehicle on a straight road.  The
agent sees its own speed, its last command, a radar estimate of the gap
and closing speed, and the driver's drowsiness flag.  While the driver is
drowsy, new commands reach the actuators ``delay_s`` later and the previous
command keeps acting in the meantime.

Sign convention: ``v_rel = v_ego - v_lead`` (positive while closing in).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .fileio import parse_kv, write_csv

# (throttle, brake) per action index
ACTIONS: tuple[tuple[float, float], ...] = (
    (0.0, 1.0),
    (0.0, 0.7),
    (0.0, 0.4),
    (0.0, 0.2),
    (0.0, 0.0),
    (1.0, 0.0),
)
N_ACTIONS = len(ACTIONS)
COAST = 4
ACCELERATE = 5

PHASES = ("acceleration", "braking", "following", "transition")
STEP_LOG_COLUMNS = ("t", "v", "d_rel", "v_rel", "theta", "action", "throttle", "brake",
                    "reward", "phase", "collided")
REWARD_TERMS = ("collision", "abrupt", "unsafe", "safe", "smooth")


@dataclass(frozen=True)
class Action:
    index: int
    throttle: float
    brake: float

    @classmethod
    def from_index(cls, index: int) -> "Action":
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index must be in 0..{N_ACTIONS - 1}, got {index}")
        throttle, brake = ACTIONS[index]
        return cls(int(index), throttle, brake)


@dataclass
class VehicleState:
    position: float = 0.0
    speed: float = 0.0
    accel: float = 0.0


@dataclass(frozen=True)
class RadarFrame:
    depth: np.ndarray
    relative_velocity: np.ndarray
    azimuth: np.ndarray
    pitch_deg: float = 2.0

    def __len__(self):
        return len(self.depth)

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]]) -> "RadarFrame":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(pts[:, 0].copy(), pts[:, 1].copy(), np.zeros(len(pts)))


@dataclass(frozen=True)
class ClusterSummary:
    d_rel: float
    v_rel: float
    cluster_count: int
    detected: bool


@dataclass(frozen=True)
class Observation:
    v: float
    action: int
    d_rel: float
    v_rel: float
    theta: int

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.action, self.d_rel, self.v_rel, self.theta], dtype=np.float64)


# fixed affine input scaling for the Q-networks
OBS_SCALE = np.array([1 / 30, 1 / 5, 1 / 100, 1 / 20, 1.0])


def normalize_obs(obs) -> np.ndarray:
    arr = obs.as_array() if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
    return arr * OBS_SCALE


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 200.0      # collision
    beta: float = 1.0         # abrupt brake-pressure change
    kappa: float = 2.0        # unsafe distance
    delta: float = 1.0        # inside the safe band
    epsilon_r: float = 0.5    # smooth braking

    def validate(self, horizon_s: float):
        for name in ("alpha", "beta", "kappa", "delta", "epsilon_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"reward weight {name} must be positive")
        if not self.alpha > horizon_s * self.delta:
            raise ValueError("alpha must exceed horizon * delta")


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.05
    max_accel: float = 3.0
    max_decel: float = 8.0
    collision_distance: float = 0.5
    delay_s: float = 0.5
    horizon_s: float = 30.0
    # radar
    radar_rate_hz: float = 1000.0
    radar_max_range: float = 150.0
    sigma_depth: float = 0.3
    sigma_vel: float = 0.2
    sigma_azimuth: float = 0.01
    clutter_fraction: float = 0.05
    dbscan_eps: float = 1.0
    dbscan_min_pts: int = 3
    depth_scale: float = 1.0
    vel_scale: float = 1.0
    # lead vehicle
    lead_segments: tuple[int, int] = (2, 4)
    lead_speed_range: tuple[float, float] = (0.0, 20.0)
    lead_max_accel: float = 2.0
    # initial conditions
    init_spacing: tuple[float, float] = (20.0, 60.0)
    # scripted drowsiness: alternating alert / drowsy spells, exponential durations
    alert_mean_s: float = 6.0
    drowsy_mean_s: float = 4.0
    # reward
    weights: RewardWeights = field(default_factory=RewardWeights)
    smooth_threshold: float = 0.3
    following_eps_v: float = 0.5

    @property
    def delay_steps(self) -> int:
        return int(round(self.delay_s / self.dt))

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon_s / self.dt))

    def validate(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name, total in (("delay_s", self.delay_s), ("horizon_s", self.horizon_s)):
            q = total / self.dt
            if abs(q - round(q)) > 1e-9:
                raise ValueError(f"{name} must be an integer multiple of dt")
        if self.init_spacing[0] < self.collision_distance:
            raise ValueError("initial spacing below collision distance")
        if self.init_spacing[0] > self.init_spacing[1]:
            raise ValueError("init_spacing range is empty")
        self.weights.validate(self.horizon_s)
        return self


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


def d_min(v: float) -> float:
    """Two-second rule with a 5 m floor."""
    return max(5.0, 2.0 * v)


def d_max(v: float) -> float:
    return d_min(v) + 10.0


def reward_terms(*, gap: float, speed: float, brake: float, prev_brake: float,
                 collided: bool, weights: RewardWeights,
                 smooth_threshold: float = 0.3, moving: bool = True) -> dict[str, float]:
    """The five reward channels; a collision step carries only the collision term.

    Smooth braking only counts while the ego vehicle is moving and the lead
    is no further than ``d_max``.  Braking at a standstill or far behind the
    lead is unnecessary braking; rewarding it makes crawling far behind the
    lead with the brake on the best policy.
    """
    terms = dict.fromkeys(REWARD_TERMS, 0.0)
    if collided:
        terms["collision"] = -weights.alpha
        return terms
    dp = abs(brake - prev_brake)
    lo = d_min(speed)
    terms["abrupt"] = -weights.beta * dp
    if gap < lo:
        terms["unsafe"] = -weights.kappa
    elif gap <= lo + 10.0:
        terms["safe"] = weights.delta
    if moving and gap <= lo + 10.0 and brake > 0.0 and dp <= smooth_threshold:
        terms["smooth"] = weights.epsilon_r
    return terms


def reward(prev: VehicleState | None, curr: VehicleState, action: Action, *, gap: float,
           prev_brake: float, collided: bool, weights: RewardWeights = RewardWeights(),
           smooth_threshold: float = 0.3) -> float:
    moving = prev.speed > 0.0 if prev is not None else True
    terms = reward_terms(gap=gap, speed=curr.speed, brake=action.brake, prev_brake=prev_brake,
                         collided=collided, weights=weights, smooth_threshold=smooth_threshold,
                         moving=moving)
    return sum(terms.values())


def label_phase(obs: Observation, eps_v: float = 0.5, detected: bool = True) -> str:
    if not detected:
        return "transition"
    lo = d_min(obs.v)
    if abs(obs.v_rel) <= eps_v and lo <= obs.d_rel <= lo + 10.0:
        return "following"
    if obs.v_rel < 0:
        return "acceleration"
    if obs.d_rel < lo and obs.v_rel > 0:
        return "braking"
    return "transition"


# -- radar ------------------------------------------------------------------

def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Label rows of ``points``; -1 marks noise.  Clusters are numbered in
    order of their lowest-index core point."""
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    diff = points[:, None, :] - points[None, :, :]
    nb = np.einsum("ijk,ijk->ij", diff, diff) <= eps * eps
    core = nb.sum(axis=1) >= min_pts
    if not core.any():
        return labels
    core_idx = np.flatnonzero(core)
    adj = nb[np.ix_(core_idx, core_idx)]
    # min-label propagation over the core graph
    lab = np.arange(len(core_idx))
    while True:
        new = np.where(adj, lab[None, :], n).min(axis=1)
        if np.array_equal(new, lab):
            break
        lab = new
    _, comp = np.unique(lab, return_inverse=True)
    labels[core_idx] = comp
    border = np.flatnonzero(~core)
    if border.size:
        hits = nb[np.ix_(border, core_idx)]
        has = hits.any(axis=1)
        labels[border[has]] = comp[hits[has].argmax(axis=1)]
    return labels


def cluster_centroid(points: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Average of the per-cluster means; noise (label -1) is ignored."""
    k = int(labels.max()) + 1 if len(labels) else 0
    if k == 0:
        raise ValueError("no clusters")
    centroids = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    return centroids.mean(axis=0), k


def cluster_radar(frame: RadarFrame, eps: float = 1.0, min_pts: int = 3,
                  depth_scale: float = 1.0, vel_scale: float = 1.0,
                  no_detection_range: float = 150.0) -> ClusterSummary:
    """Average of DBSCAN cluster centroids over (depth, relative velocity)."""
    n = len(frame)
    if n == 1:
        return ClusterSummary(float(frame.depth[0]), float(frame.relative_velocity[0]), 1, True)
    if n == 0:
        return ClusterSummary(no_detection_range, 0.0, 0, False)
    pts = np.column_stack([frame.depth, frame.relative_velocity])
    labels = dbscan(pts / (depth_scale, vel_scale), eps, min_pts)
    if labels.max() < 0:
        return ClusterSummary(no_detection_range, 0.0, 0, False)
    p_c, k = cluster_centroid(pts, labels)
    return ClusterSummary(float(p_c[0]), float(p_c[1]), k, True)


# -- scenarios --------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Everything random about one episode, so paired runs can replay it."""
    seed: int
    init_spacing: float
    lead_profile: tuple[tuple[float, float], ...]        # (start time s, target speed m/s)
    drowsy_intervals: tuple[tuple[float, float], ...] = ()

    @classmethod
    def sample(cls, config: EnvConfig, seed: int) -> "Scenario":
        rng = np.random.default_rng([seed, 0])
        spacing = float(rng.uniform(*config.init_spacing))
        n_seg = int(rng.integers(config.lead_segments[0], config.lead_segments[1] + 1))
        starts = np.sort(rng.uniform(0.0, config.horizon_s, n_seg - 1))
        speeds = rng.uniform(*config.lead_speed_range, n_seg)
        profile = tuple(zip([0.0, *map(float, starts)], map(float, speeds)))
        intervals = []
        t = float(rng.exponential(config.alert_mean_s))
        while t < config.horizon_s:
            end = t + float(rng.exponential(config.drowsy_mean_s))
            intervals.append((t, min(end, config.horizon_s)))
            t = end + float(rng.exponential(config.alert_mean_s))
        return cls(seed, spacing, profile, tuple(intervals))

    def lead_target(self, t: float) -> float:
        speed = self.lead_profile[0][1]
        for start, s in self.lead_profile:
            if t >= start:
                speed = s
        return speed

    def drowsy_at(self, t: float) -> int:
        return int(any(a <= t < b for a, b in self.drowsy_intervals))

    def to_text(self) -> str:
        prof = ";".join(f"{a!r}:{b!r}" for a, b in self.lead_profile)
        drow = ";".join(f"{a!r}:{b!r}" for a, b in self.drowsy_intervals)
        return (f"seed={self.seed}\ninit_spacing={self.init_spacing!r}\n"
                f"lead_profile={prof}\ndrowsy_schedule={drow}\n")

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        kv = parse_kv(text, "scenario")

        def pairs(s):
            return tuple(tuple(float(x) for x in item.split(":")) for item in s.split(";") if item)

        return cls(int(kv["seed"]), float(kv["init_spacing"]), pairs(kv["lead_profile"]),
                   pairs(kv.get("drowsy_schedule", "")))


ThetaSource = Callable[[float], int]


class BrakingEnv:
    """Single-threaded simulator; ``reset`` then ``step`` until ``done``."""

    def __init__(self, config: EnvConfig | None = None, record: bool = False):
        self.config = (config or EnvConfig()).validate()
        self.record = record
        self.log: list[tuple] = []
        self.done = True

    # lifecycle
    def reset(self, seed: int = 0, drowsy_mode="schedule", scenario: Scenario | None = None) -> Observation:
        cfg = self.config
        self.scenario = scenario if scenario is not None else Scenario.sample(cfg, seed)
        if self.scenario.init_spacing < cfg.collision_distance:
            raise ValueError("initial spacing below collision distance")
        self._theta_fn = self._theta_source(drowsy_mode)
        self._radar_rng = np.random.default_rng([self.scenario.seed, 1])
        self.ego = VehicleState()
        lead_v = self.scenario.lead_target(0.0)
        self.lead = VehicleState(self.scenario.init_spacing, lead_v, 0.0)
        self.k = 0
        self.t = 0.0
        self.done = False
        self.collided = False
        self._pending: list[tuple[int, int, int]] = []   # (effective step, issue step, action)
        self._effective = COAST
        self._effective_issue = -1
        self._brake = 0.0
        self._last_cmd = COAST
        self.log = []
        self.last_summary = self._sense()
        self.observation = Observation(0.0, COAST, self.last_summary.d_rel,
                                       self.last_summary.v_rel, self._theta_fn(0.0))
        return self.observation

    def _theta_source(self, mode) -> ThetaSource:
        if callable(mode):
            return lambda t: int(mode(t))
        if hasattr(mode, "theta"):
            return lambda t: int(mode.theta())
        if mode in ("off", False, None, 0):
            return lambda t: 0
        if mode in ("on", "always", True, 1):
            return lambda t: 1
        if mode == "schedule":
            return self.scenario.drowsy_at
        raise ValueError(f"unknown drowsy_mode {mode!r}")

    @property
    def gap(self) -> float:
        return self.lead.position - self.ego.position

    def _sense(self) -> ClusterSummary:
        frame = self.radar_frame(self.gap, self.ego.speed - self.lead.speed)
        cfg = self.config
        return cluster_radar(frame, cfg.dbscan_eps, cfg.dbscan_min_pts, cfg.depth_scale,
                             cfg.vel_scale, cfg.radar_max_range)

    def radar_frame(self, gap: float, v_rel: float) -> RadarFrame:
        cfg = self.config
        rng = self._radar_rng
        cap = int(cfg.radar_rate_hz * cfg.dt)
        n = min(int(rng.poisson(cfg.radar_rate_hz * cfg.dt)), cap)
        depth = gap + cfg.sigma_depth * rng.standard_normal(n)
        vel = v_rel + cfg.sigma_vel * rng.standard_normal(n)
        az = cfg.sigma_azimuth * rng.standard_normal(n)
        clutter = rng.random(n) < cfg.clutter_fraction
        nc = int(clutter.sum())
        depth[clutter] = rng.uniform(1.0, cfg.radar_max_range, nc)
        vel[clutter] = rng.uniform(-20.0, 20.0, nc)
        az[clutter] = rng.uniform(-0.3, 0.3, nc)
        keep = clutter | (gap <= cfg.radar_max_range)
        depth = np.maximum(depth[keep], 1e-3)
        return RadarFrame(depth, vel[keep], az[keep])

    def _resolve_actuator(self, action: int, theta: int) -> int:
        k = self.k
        self._pending.append((k + (self.config.delay_steps if theta else 0), k, action))
        ready = [p for p in self._pending if p[0] <= k]
        if ready:
            _, issue, act = max(ready, key=lambda p: p[1])
            if issue > self._effective_issue:
                self._effective, self._effective_issue = act, issue
        self._pending = [p for p in self._pending if p[0] > k and p[1] > self._effective_issue]
        return self._effective

    @staticmethod
    def _integrate(state: VehicleState, accel: float, dt: float):
        v0 = state.speed
        v1 = v0 + accel * dt
        if v1 > 1e-9:
            state.position += v0 * dt + 0.5 * accel * dt * dt
            state.speed = v1
        else:
            if accel < 0 and v0 > 0:
                state.position += 0.5 * v0 * (v0 / -accel)
            state.speed = 0.0
        state.accel = accel

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = int(action.index if isinstance(action, Action) else action)
        if not 0 <= a < N_ACTIONS:
            raise ValueError(f"invalid action {a}")
        cfg = self.config
        theta = self._theta_fn(self.t)
        eff = self._resolve_actuator(a, theta)
        throttle, brake = ACTIONS[eff]

        accel = throttle * cfg.max_accel - brake * abs(cfg.max_decel)
        moving = self.ego.speed > 0.0
        self._integrate(self.ego, accel, cfg.dt)
        target = self.scenario.lead_target(self.t)
        lead_a = (target - self.lead.speed) / cfg.dt
        lead_a = min(max(lead_a, -cfg.lead_max_accel), cfg.lead_max_accel)
        self._integrate(self.lead, lead_a, cfg.dt)

        self.k += 1
        self.t = self.k * cfg.dt
        gap = self.gap
        v_rel_true = self.ego.speed - self.lead.speed
        collided = gap <= cfg.collision_distance
        terms = reward_terms(gap=gap, speed=self.ego.speed, brake=brake, prev_brake=self._brake,
                             collided=collided, weights=cfg.weights,
                             smooth_threshold=cfg.smooth_threshold, moving=moving)
        r = sum(terms.values())
        self._brake = brake
        self._last_cmd = a
        self.collided = collided
        self.done = collided or self.k >= cfg.horizon_steps

        self.last_summary = summary = self._sense()
        obs = Observation(self.ego.speed, a, summary.d_rel, summary.v_rel,
                          self._theta_fn(self.t))
        truth = Observation(self.ego.speed, a, gap, v_rel_true, theta)
        phase = label_phase(truth, cfg.following_eps_v)
        unsafe = (not collided) and gap < d_min(self.ego.speed)
        info = {"collided": collided, "unsafe_this_step": unsafe, "phase": phase,
                "terms": terms, "throttle": throttle, "brake": brake,
                "effective_action": eff, "theta_applied": theta, "gap": gap,
                "v_rel_true": v_rel_true, "detected": summary.detected}
        if self.record:
            self.log.append((self.t, self.ego.speed, gap, v_rel_true, theta, a, throttle, brake,
                             r, phase, int(collided)))
        self.observation = obs
        return StepResult(obs, r, self.done, info)

    def write_log(self, path):
        write_csv(path, STEP_LOG_COLUMNS, self.log)


def with_overrides(config: EnvConfig, **kw) -> EnvConfig:
    weights = {k: kw.pop(k) for k in list(kw) if k in RewardWeights.__dataclass_fields__}
    if weights:
        kw["weights"] = replace(config.weights, **weights)
    return replace(config, **kw)


def stopping_distance(action: int, v0: float, config: EnvConfig | None = None) -> float:
    """Distance covered holding ``action`` from speed ``v0`` until standstill (noise free)."""
    cfg = config or EnvConfig()
    throttle, brake = ACTIONS[action]
    accel = throttle * cfg.max_accel - brake * abs(cfg.max_decel)
    if accel >= 0:
        return math.inf
    return v0 * v0 / (2.0 * -accel)
