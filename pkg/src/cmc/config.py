"""Run configuration: flat JSON with ``--key=value`` command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

DEFAULT_EPISODES = {"reacher": 1500, "grasper": 2500}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    env: str = "reacher"
    reward: str = "sparse"
    algo: str = "cacla"
    cmc: bool = True
    # planner
    horizon: int = 3
    plan_iterations: int = 10
    plan_rate: float = 0.05
    target_return: float = 1.0
    # curiosity
    window: int = 40
    lag: int = 20
    decay: float = 0.1
    initial_lp: float = -1.0
    # learner
    gamma: float = 0.99
    tau: float = 1e-3
    lam_rec: float = 0.1
    lam_critic: float = 1.0
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    cacla_lr: float = 1e-2
    model_lr: float = 1e-3
    latent_dim: int = 8
    preset: str = "desk"
    model_hidden: int = 64
    # schedule
    minibatch: int = 32
    n_ac: int = 2
    n_model: int = 2
    buffer_capacity: int = 20_000
    noise_std: float = 1.0
    reencode: bool = False
    # episodes (0 selects the per-environment default)
    episodes: int = 0
    episode_length: int = 30
    max_step: float = 20.0
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        _check_choice("env", self.env, ("reacher", "grasper"))
        _check_choice("reward", self.reward, ("dense", "sparse"))
        _check_choice("algo", self.algo, ("ddpg", "cacla"))
        _check_choice("preset", self.preset, ("desk", "full"))
        for key in ("horizon", "plan_iterations", "window", "lag", "latent_dim", "model_hidden", "minibatch",
                    "buffer_capacity", "episode_length"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("n_ac", "n_model", "episodes", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        for key in ("plan_rate", "decay", "critic_lr", "actor_lr", "cacla_lr", "model_lr", "max_step"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be > 0")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau", "must be in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma", "must be in [0, 1]")
        if self.initial_lp >= 0:
            raise ConfigError("initial_lp", "must be negative")
        if self.lam_rec < 0 or self.lam_critic < 0:
            raise ConfigError("lam_rec" if self.lam_rec < 0 else "lam_critic", "must be >= 0")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")
        if self.buffer_capacity < self.minibatch:
            raise ConfigError("buffer_capacity", "must hold at least one minibatch")

    @property
    def n_episodes(self):
        return self.episodes or DEFAULT_EPISODES[self.env]

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        clean = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(key, "unknown key")
            clean[key] = _coerce(key, value, known[key].type)
        return cls(**clean)

    def override(self, **changes):
        return replace(self, **{k: _coerce(k, v, _field_type(k)) for k, v in changes.items()})


def _field_type(key):
    for f in fields(RunConfig):
        if f.name == key:
            return f.type
    raise ConfigError(key, "unknown key")


def _check_choice(key, value, choices):
    if value not in choices:
        raise ConfigError(key, f"must be one of {list(choices)}, got {value!r}")


def _coerce(key, value, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {kind}, got {value!r}") from None


def parse_flags(args):
    """Turn ``["--key=value", ...]`` into a dict; dashes in keys map to underscores."""
    out = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(arg, "overrides must look like --key=value")
        key, value = arg[2:].split("=", 1)
        key = key.replace("-", "_")
        if key in out:
            raise ConfigError(key, "given twice")
        out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file, then overrides (flags win)."""
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config", "file must hold a flat JSON object")
    data.update(overrides or {})
    return RunConfig.from_dict(data)
