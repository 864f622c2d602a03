"""Flat ``dotted.key = value`` configuration.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines are
ignored. Values are parsed as JSON when possible (numbers, booleans, lists,
quoted strings) and kept as bare strings otherwise. Precedence is
override > file > defaults.
"""

from __future__ import annotations

import json
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seeds": [0],
    "tasks": ["pendulum-swingup"],
    "out_dir": "runs",
    # environments and evaluation
    "env.acrobot_substeps": 10,
    "env.acrobot_init": "uniform",
    "eval.episodes": 16,
    "eval.seed": 1234,
    # data
    "data.episodes": 2000,
    "data.random_fraction": 0.3,
    "data.num_checkpoints": 5,
    "data.steps_per_checkpoint": 100,
    "data.action_noise": 0.3,
    "data.path": "",
    # world model
    "wm.latent_dim": 64,
    "wm.simplex_dim": 8,
    "wm.task_dim": 16,
    "wm.enc_hidden": [128],
    "wm.dyn_hidden": [128, 128],
    "wm.rew_hidden": [128, 128],
    "wm.hidden_activation": "mish",
    "wm.latent_activation": "simnorm",
    "wm.num_bins": 101,
    "wm.vmin": -10.0,
    "wm.vmax": 10.0,
    "wm.horizon": 16,
    "wm.gamma": 0.99,
    "wm.batch_size": 64,
    "wm.steps": 10000,
    "wm.lr": 3e-4,
    "wm.grad_clip": 20.0,
    "wm.checkpoint": "",
    # policy
    "policy.horizon": 16,
    "policy.gamma": 0.99,
    "policy.lam": 0.95,
    "policy.batch_size": 64,
    "policy.actor_lr": 5e-4,
    "policy.critic_lr": 5e-4,
    "policy.actor_clip": 1.0,
    "policy.critic_clip": 100.0,
    "policy.critic_splits": 4,
    "policy.critic_iterations": 8,
    "policy.num_critics": 3,
    "policy.actor_objective": "td-n",
    "policy.actor_hidden": [64, 64],
    "policy.critic_hidden": [64, 64],
    "policy.std_floor": 0.24,
    "policy.std_max": 1.0,
    "policy.std_init": 1.0,
    "policy.critic_rewards": "pseudo",
    "policy.steps": 10000,
    "policy.eval_every": 500,
    "policy.eval_episodes": 8,
    "policy.checkpoint": "",
    "policy.critic_checkpoint": "",
    "policy.model": "wm",
    # diagnostics
    "diag.horizons": [10, 20, 30, 40, 50],
    "diag.n_samples": 100,
    "diag.checkpoints": 3,
    "diag.start_states": 5,
    "diag.checkpoint_steps": 100,
    "diag.episodes": 150,
    "diag.wm_horizons": [16, 3],
    "diag.gamma": 0.99,
    # ball-wall surrogate fits
    "ballwall.hidden": [32, 32],
    "ballwall.lr": 2e-3,
    "ballwall.epochs": 100,
    "ballwall.batch_size": 50,
    "ballwall.n_samples": 1000,
    "ballwall.descent_lr": 1e-2,
    "ballwall.descent_steps": 1000,
    "ballwall.wall_distance": 3.0,
    "ballwall.wall_height": 1.0,
    "ballwall.grid_points": 2001,
    # ablations and multi-task
    "ablate.variants": ["relu", "mish", "mish+simnorm"],
    "multitask.tasks": ["pendulum-swingup", "pendulum-spin"],
}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    return key.strip(), parse_value(value)


def _check_keys(cfg: dict, defaults: dict, source: str) -> None:
    for key in cfg:
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (from {source})")


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]
        return value
    # bare words that happen to parse as JSON (true, 3) keep their spelling
    return value if isinstance(value, str) else json.dumps(value)


def resolve(file_path=None, overrides=(), defaults: dict | None = None) -> dict:
    """Layer defaults, then the config file, then ``key=value`` overrides."""
    defaults = DEFAULTS if defaults is None else defaults
    cfg = dict(defaults)
    if file_path:
        p = Path(file_path)
        if not p.is_file():
            raise ConfigError(f"config file {file_path} does not exist")
        layer = parse_text(p.read_text(), str(p))
        _check_keys(layer, defaults, str(p))
        cfg.update({k: _coerce(k, v, defaults[k]) for k, v in layer.items()})
    for item in overrides:
        k, v = parse_override(item) if isinstance(item, str) else item
        _check_keys({k: v}, defaults, "--override")
        cfg[k] = _coerce(k, v, defaults[k])
    if not cfg["seeds"]:
        raise ConfigError("seeds must be nonempty")
    if cfg["policy.critic_rewards"] not in ("pseudo", "eval"):
        raise ConfigError(f"policy.critic_rewards must be 'pseudo' or 'eval', got {cfg['policy.critic_rewards']!r}")
    if cfg["policy.model"] not in ("wm", "true"):
        raise ConfigError(f"policy.model must be 'wm' or 'true', got {cfg['policy.model']!r}")
    for key in ("data.path", "wm.checkpoint", "policy.checkpoint", "policy.critic_checkpoint"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise ConfigError(f"config key {key!r} points to missing path {cfg[key]}")
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(cfg.items()))


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
