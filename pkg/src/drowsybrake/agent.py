"""Deep Q-learning braking agent: replay memory, exploration, the four
Q-network variants, Bellman targets and the train / paired-evaluation loops."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .env import (ACCELERATE, N_ACTIONS, PHASES, BrakingEnv, EnvConfig, Scenario,
                  normalize_obs)
from .fileio import read_kv, write_csv, write_kv
from .nn import Adam, Dense, DivergenceError, Module, Sequential, copy_params, load_weights, save_weights

VARIANTS = ("DQN", "DoubleDQN", "DuelingDQN", "DoubleDuelingDQN")
_ALIASES = {
    "dqn": "DQN", "double": "DoubleDQN", "doubledqn": "DoubleDQN", "ddqn": "DoubleDQN",
    "dueling": "DuelingDQN", "duelingdqn": "DuelingDQN",
    "dddqn": "DoubleDuelingDQN", "doubleduelingdqn": "DoubleDuelingDQN",
}
OBS_DIM = 5


def variant_tag(name: str) -> str:
    if name in VARIANTS:
        return name
    try:
        return _ALIASES[name.lower().replace("-", "").replace("_", "")]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}") from None


def is_double(variant: str) -> bool:
    return variant_tag(variant).startswith("Double")


def is_dueling(variant: str) -> bool:
    return "Dueling" in variant_tag(variant)


class QNetwork(Module):
    """Shared dense trunk with either a plain head or value/advantage streams."""

    def __init__(self, variant: str, rng: np.random.Generator | None = None,
                 n_inputs: int = OBS_DIM, n_actions: int = N_ACTIONS,
                 trunk=(128, 256, 128), stream=(128, 64), dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant_tag(variant)
        self.dueling = is_dueling(self.variant)
        self.n_actions = n_actions
        sizes = (n_inputs, *trunk)
        self.trunk = Sequential([Dense(a, b, "relu", rng, f"trunk.{i}", dtype)
                                 for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))])
        if self.dueling:
            self.value = self._stream(trunk[-1], stream, 1, rng, "value", dtype)
            self.advantage = self._stream(trunk[-1], stream, n_actions, rng, "advantage", dtype)
        else:
            self.head = Dense(trunk[-1], n_actions, "identity", rng, "head", dtype)

    @staticmethod
    def _stream(n_in, hidden, n_out, rng, name, dtype):
        sizes = (n_in, *hidden)
        layers = [Dense(a, b, "relu", rng, f"{name}.{i}", dtype)
                  for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        layers.append(Dense(sizes[-1], n_out, "identity", rng, f"{name}.{len(hidden)}", dtype))
        return Sequential(layers)

    def children(self):
        return [self.trunk, self.value, self.advantage] if self.dueling else [self.trunk, self.head]

    def parameters(self):
        return [p for c in self.children() for p in c.parameters()]

    def value_advantage(self, x):
        h = self.trunk.forward(x)
        return self.value.forward(h), self.advantage.forward(h)

    def forward(self, x):
        h = self.trunk.forward(x)
        if not self.dueling:
            return self.head.forward(h)
        v = self.value.forward(h)
        a = self.advantage.forward(h)
        return v + (a - a.mean(axis=1, keepdims=True))

    def backward(self, dq):
        if not self.dueling:
            return self.trunk.backward(self.head.backward(dq))
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        dh = self.value.backward(dv) + self.advantage.backward(da)
        return self.trunk.backward(dh)


def q_values(net: QNetwork, obs) -> np.ndarray:
    """Q-values for one raw observation (or a batch of normalised rows)."""
    x = normalize_obs(obs)[None] if not isinstance(obs, np.ndarray) or obs.ndim == 1 else obs
    q = net.forward(x)
    if not np.all(np.isfinite(q)):
        raise DivergenceError("divergence: non-finite Q-values")
    return q[0] if q.shape[0] == 1 and (not isinstance(obs, np.ndarray) or obs.ndim == 1) else q


class ReplayBuffer:
    """FIFO transition store backed by preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done):
        if not 0 <= a < N_ACTIONS:
            raise ValueError(f"invalid action {a}")
        if not math.isfinite(r):
            raise ValueError("reward must be finite")
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self):
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def transitions(self):
        """Stored transitions, oldest first."""
        for i in self._order():
            yield self.s[i].copy(), int(self.a[i]), float(self.r[i]), self.s2[i].copy(), bool(self.done[i])

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]


@dataclass
class AgentConfig:
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 300.0 / math.log(19.0)    # epsilon hits 0.1 at episode 300
    guided_episodes: int = 50
    guided_accel_prob: float = 0.8
    batch_size: int = 64
    target_sync_period: int = 1000
    learning_rate: float = 5e-4
    buffer_capacity: int = 50_000
    warmup_threshold: int = 5_000
    train_every: int = 2          # decisions between gradient steps
    action_repeat: int = 4       # simulator steps per decision (0.2 s at dt = 0.05)

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_end", "guided_accel_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("batch_size", "target_sync_period", "buffer_capacity", "train_every",
                     "action_repeat"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self

    def epsilon(self, episode: int) -> float:
        return self.eps_end + (self.eps_start - self.eps_end) * math.exp(-episode / self.eps_decay)


def bellman_target(batch, variant: str, policy_net: QNetwork, target_net: QNetwork,
                   gamma: float) -> np.ndarray:
    """``r`` for terminal rows, else ``r + gamma * Q_target(s', a*)`` where ``a*``
    is the target net's own argmax (vanilla) or the policy net's (Double)."""
    _, _, r, s2, done = batch
    r = np.asarray(r, dtype=np.float64)
    done = np.asarray(done, dtype=bool)
    y = r.copy()
    live = ~done
    if gamma == 0.0 or not live.any():
        return y
    q_t = target_net.forward(s2[live])
    if is_double(variant):
        a_star = np.argmax(policy_net.forward(s2[live]), axis=1)
        nxt = q_t[np.arange(len(a_star)), a_star]
    else:
        nxt = q_t.max(axis=1)
    y[live] += gamma * nxt
    return y


class DQNAgent:
    def __init__(self, variant: str, config: AgentConfig | None = None, seed: int = 0):
        self.variant = variant_tag(variant)
        self.config = (config or AgentConfig()).validate()
        self.seed = seed
        init_rng = np.random.default_rng([seed, 11])
        self.policy = QNetwork(self.variant, init_rng)
        self.target = QNetwork(self.variant, init_rng)
        copy_params(self.policy.parameters(), self.target.parameters())
        self.adam = Adam(self.policy.parameters(), self.config.learning_rate)
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.rng = np.random.default_rng([seed, 12])
        self.updates = 0

    def greedy(self, x: np.ndarray) -> int:
        q = self.policy.forward(x[None])[0]
        if not np.all(np.isfinite(q)):
            raise DivergenceError("divergence: non-finite Q-values")
        return int(np.argmax(q))

    def select_action(self, x: np.ndarray, episode: int, rng: np.random.Generator | None = None,
                      epsilon: float | None = None) -> int:
        """Guided warm start, then epsilon-greedy; ``x`` is a normalised observation."""
        rng = rng if rng is not None else self.rng
        cfg = self.config
        if epsilon is None and episode < cfg.guided_episodes:
            if rng.random() < cfg.guided_accel_prob:
                return ACCELERATE
            others = [a for a in range(N_ACTIONS) if a != ACCELERATE]
            return others[int(rng.integers(len(others)))]
        eps = cfg.epsilon(episode) if epsilon is None else epsilon
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(N_ACTIONS))
        return self.greedy(x)

    def train_step(self) -> float:
        cfg = self.config
        if len(self.buffer) < max(cfg.warmup_threshold, 1):
            raise RuntimeError("buffer warming up")
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        return self.fit_batch(batch)

    def fit_batch(self, batch) -> float:
        cfg = self.config
        s, a, _, _, _ = batch
        y = bellman_target(batch, self.variant, self.policy, self.target, cfg.gamma)
        self.policy.zero_grad()
        q = self.policy.forward(s)
        rows = np.arange(len(a))
        diff = q[rows, a] - y
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise DivergenceError("divergence: non-finite loss")
        dq = np.zeros_like(q)
        dq[rows, a] = 2.0 * diff / len(a)
        self.policy.backward(dq)
        self.adam.step()
        self.updates += 1
        if self.updates % cfg.target_sync_period == 0:
            self.sync_target()
        return loss

    def sync_target(self):
        copy_params(self.policy.parameters(), self.target.parameters())

    # persistence
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_weights(d / "policy.txt", self.policy.parameters())
        save_weights(d / "target.txt", self.target.parameters())
        write_kv(d / "agent_config.txt", {"variant": self.variant, "seed": self.seed,
                                          **asdict(self.config)})

    @classmethod
    def load(cls, directory) -> "DQNAgent":
        d = Path(directory)
        kv = read_kv(d / "agent_config.txt")
        kinds = {f.name: f.type for f in fields(AgentConfig)}
        cfg = AgentConfig(**{k: (int(v) if kinds[k] in ("int", int) else float(v))
                             for k, v in kv.items() if k in kinds})
        agent = cls(kv["variant"], cfg, int(kv["seed"]))
        load_weights(d / "policy.txt", agent.policy.parameters())
        load_weights(d / "target.txt", agent.target.parameters())
        return agent


def moving_average(values, window: int = 10) -> np.ndarray:
    """Mean of the current value and up to ``window - 1`` preceding ones."""
    x = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(len(x))
    lo = np.maximum(0, i - window + 1)
    return (c[i + 1] - c[lo]) / (i + 1 - lo)


TRAINING_COLUMNS = ("episode", "cumulative_reward", "moving_avg_10", "min_reward_to_date", "epsilon")


@dataclass
class TrainingReport:
    variant: str
    rewards: list[float]
    epsilons: list[float]
    losses: list[float]
    collisions: list[bool]
    agent: DQNAgent | None = None

    @property
    def moving_avg(self) -> np.ndarray:
        return moving_average(self.rewards, 10)

    def rows(self):
        ma = self.moving_avg
        mins = np.minimum.accumulate(self.rewards) if self.rewards else []
        return [(i, self.rewards[i], float(ma[i]), float(mins[i]), self.epsilons[i])
                for i in range(len(self.rewards))]

    def write_csv(self, path):
        write_csv(path, TRAINING_COLUMNS, self.rows())


def train_scenario_seed(seed: int, episode: int) -> int:
    return seed * 1_000_003 + episode


def eval_scenario_seed(seed: int, index: int) -> int:
    return 2_000_000_000 + seed * 1_000_003 + index


def train(env_factory: Callable[[], BrakingEnv], variant: str, episodes: int, seed: int,
          config: AgentConfig | None = None, drowsy_mode="schedule",
          progress: Callable[[int, float], None] | None = None) -> TrainingReport:
    agent = DQNAgent(variant, config, seed)
    cfg = agent.config
    env = env_factory()
    act_rng = np.random.default_rng([seed, 13])
    report = TrainingReport(agent.variant, [], [], [], [], agent)
    decisions = 0
    for ep in range(episodes):
        obs = env.reset(train_scenario_seed(seed, ep), drowsy_mode)
        x = normalize_obs(obs)
        total = 0.0
        done = False
        while not done:
            a = agent.select_action(x, ep, act_rng)
            r = 0.0
            for _ in range(cfg.action_repeat):
                res = env.step(a)
                r += res.reward
                if res.done:
                    break
            x2 = normalize_obs(res.observation)
            terminal = bool(res.info["collided"])
            agent.buffer.push(x, a, r, x2, terminal)
            total += r
            decisions += 1
            done = res.done
            x = x2
            if len(agent.buffer) >= cfg.warmup_threshold and decisions % cfg.train_every == 0:
                report.losses.append(agent.train_step())
        report.rewards.append(total)
        report.epsilons.append(cfg.epsilon(ep))
        report.collisions.append(env.collided)
        if progress is not None:
            progress(ep, total)
    return report


# -- paired evaluation ------------------------------------------------------

EPISODE_COLUMNS = ("scenario", "arm", "collided", "success", "steps", "cumulative_reward",
                   "mean_distance_m", "mean_brake_pressure", "unsafe_time_s",
                   "unsafe_time_theta1_s", "drowsy_time_s",
                   *(f"{p}_s" for p in PHASES))


@dataclass
class EpisodeStats:
    scenario: int
    arm: str
    collided: bool
    success: bool
    steps: int
    cumulative_reward: float
    mean_distance_m: float
    mean_brake_pressure: float
    unsafe_time_s: float
    unsafe_time_theta1_s: float
    drowsy_time_s: float
    phase_s: dict

    def row(self):
        return (self.scenario, self.arm, self.collided, self.success, self.steps,
                self.cumulative_reward, self.mean_distance_m, self.mean_brake_pressure,
                self.unsafe_time_s, self.unsafe_time_theta1_s, self.drowsy_time_s,
                *(self.phase_s[p] for p in PHASES))


def run_episode(agent: DQNAgent, env: BrakingEnv, scenario: Scenario, drowsy_mode, index: int,
                arm: str) -> EpisodeStats:
    obs = env.reset(scenario.seed, drowsy_mode, scenario=scenario)
    dt = env.config.dt
    total = 0.0
    gaps, brakes = [], []
    unsafe = unsafe_theta = drowsy = 0.0
    phases = dict.fromkeys(PHASES, 0.0)
    repeat = agent.config.action_repeat
    done = False
    while not done:
        if env.k % repeat == 0:
            a = agent.greedy(normalize_obs(obs))
        res = env.step(a)
        info = res.info
        total += res.reward
        gaps.append(info["gap"])
        if info["brake"] > 0:
            brakes.append(info["brake"])
        if info["unsafe_this_step"]:
            unsafe += dt
            if info["theta_applied"]:
                unsafe_theta += dt
        drowsy += dt * info["theta_applied"]
        phases[info["phase"]] += dt
        obs = res.observation
        done = res.done
    return EpisodeStats(index, arm, env.collided, not env.collided, env.k, total,
                        float(np.mean(gaps)), float(np.mean(brakes)) if brakes else 0.0,
                        unsafe, unsafe_theta, drowsy, phases)


@dataclass
class EvaluationReport:
    episodes: list[EpisodeStats]

    def arm(self, name):
        return [e for e in self.episodes if e.arm == name]

    def summary(self) -> dict[str, float]:
        eps = self.episodes
        rewards = np.array([e.cumulative_reward for e in eps])
        out = {
            "episodes": len(eps),
            "success_rate": float(np.mean([e.success for e in eps])),
            "collision_rate": float(np.mean([e.collided for e in eps])),
            "mean_reward": float(rewards.mean()),
            "median_reward": float(np.median(rewards)),
            "mean_distance_m": float(np.mean([e.mean_distance_m for e in eps])),
            "mean_brake_pressure": _mean_nonzero([e.mean_brake_pressure for e in eps]),
        }
        for arm in ("drowsy", "alert"):
            sub = self.arm(arm)
            out[f"unsafe_time_{arm}_s"] = float(sum(e.unsafe_time_s for e in sub))
            out[f"collision_rate_{arm}"] = float(np.mean([e.collided for e in sub])) if sub else 0.0
            out[f"mean_distance_{arm}_m"] = float(np.mean([e.mean_distance_m for e in sub])) if sub else 0.0
            out[f"mean_brake_pressure_{arm}"] = _mean_nonzero([e.mean_brake_pressure for e in sub])
            for p in PHASES:
                out[f"{p}_{arm}_s"] = float(np.mean([e.phase_s[p] for e in sub])) if sub else 0.0
        out["unsafe_time_theta1_s"] = float(sum(e.unsafe_time_theta1_s for e in eps))
        return out

    def write(self, directory):
        d = Path(directory)
        write_csv(d / "episodes.csv", EPISODE_COLUMNS, [e.row() for e in self.episodes])
        s = self.summary()
        write_csv(d / "summary.csv", ("metric", "value"), list(s.items()))


def _mean_nonzero(values) -> float:
    vals = [v for v in values if v > 0]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_paired(agent: DQNAgent, n_scenarios: int, seed: int,
                    env_config: EnvConfig | None = None, log_dir=None,
                    drowsy_arm="schedule") -> EvaluationReport:
    """Run every sampled scenario twice, with and without drowsiness, greedily."""
    env = BrakingEnv(env_config, record=log_dir is not None)
    episodes = []
    for i in range(n_scenarios):
        scenario = Scenario.sample(env.config, eval_scenario_seed(seed, i))
        for arm, mode in (("drowsy", drowsy_arm), ("alert", "off")):
            episodes.append(run_episode(agent, env, scenario, mode, i, arm))
            if log_dir is not None:
                env.write_log(Path(log_dir) / f"scenario_{i:04d}_{arm}.csv")
    return EvaluationReport(episodes)
