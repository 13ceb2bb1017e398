"""Flat ``key=value`` run configuration covering every tunable default."""
from __future__ import annotations

from dataclasses import fields, replace

from .agent import AgentConfig
from .detector import DetectorConfig
from .env import EnvConfig, RewardWeights
from .fileio import fmt, parse_kv


class ConfigError(ValueError):
    pass


# keys that do not live on one of the component dataclasses
_EXTRA = {
    "capsule.window_samples": 15360,
    "capsule.sample_rate_hz": 128,
    "capsule.min_gap_s": 120.0,
    "capsule.anchor": "end",
    "capsule.config": "C6400_N6_M72",
    "capsule.n_min": 2,
    "capsule.n_max": 200,
    "capsule.c_min_s": 40,
    "capsule.c_max_s": 120,
    "capsule.inference_overlap": 0.75,
    "cv.folds": 5,
    "cv.holdout_fraction": 0.2,
    "train.variant": "DoubleDuelingDQN",
    "train.episodes": 500,
    "train.drowsy_mode": "schedule",
    "eval.scenarios": 200,
    "eval.drowsy_mode": "schedule",
    "eval.write_logs": 1,
}


def _dataclass_defaults(prefix, cls, skip=()):
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(cls(), f.name)
        out[f"{prefix}.{f.name}"] = ",".join(fmt(x) for x in v) if isinstance(v, tuple) else v
    return out


def defaults() -> dict[str, object]:
    d = {}
    d.update(_dataclass_defaults("env", EnvConfig, skip=("weights",)))
    d.update(_dataclass_defaults("reward", RewardWeights))
    d.update(_dataclass_defaults("agent", AgentConfig))
    d.update(_dataclass_defaults("detector", DetectorConfig))
    d.update(_EXTRA)
    return d


def _coerce(key: str, raw, default):
    try:
        if isinstance(default, bool):
            return raw in ("1", "true", "True", True, 1)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


class RunConfig:
    """Defaults, then a config file, then ``key=value`` overrides.  Unknown
    keys are rejected."""

    def __init__(self, values: dict | None = None):
        self._defaults = defaults()
        self.values = dict(self._defaults)
        if values:
            self.update(values)

    def update(self, values: dict, source: str = "override"):
        for k, v in values.items():
            if k not in self._defaults:
                raise ConfigError(f"unknown config key {k!r} ({source})")
            self.values[k] = _coerce(k, v, self._defaults[k])
        return self

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                text = open(path).read()
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from None
            cfg.update(parse_kv(text, str(path)), str(path))
        over = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            over[k.strip()] = v.strip()
        return cfg.update(over)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def snapshot(self) -> dict[str, str]:
        # repr keeps floats exact, so a snapshot fed back as --config reproduces the run
        return {k: repr(v) if isinstance(v, float) else fmt(v) for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.snapshot().items())

    # -- component configs ---------------------------------------------------

    def env_config(self) -> EnvConfig:
        kw = {}
        base = EnvConfig()
        for k, v in self.section("env").items():
            cur = getattr(base, k)
            if isinstance(cur, tuple):
                parts = str(v).split(",")
                if len(parts) != len(cur):
                    raise ConfigError(f"env.{k}: expected {len(cur)} comma-separated values")
                v = tuple(type(c)(float(p)) for c, p in zip(cur, parts))
            kw[k] = v
        w = RewardWeights(**self.section("reward"))
        try:
            return replace(base, weights=w, **kw).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def agent_config(self) -> AgentConfig:
        try:
            return AgentConfig(**self.section("agent")).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def detector_config(self) -> DetectorConfig:
        try:
            return DetectorConfig(**self.section("detector")).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
