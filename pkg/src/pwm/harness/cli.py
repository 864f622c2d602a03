"""Command-line entry point.

Every subcommand resolves its configuration (built-in defaults < ``--config``
file < ``--override`` / dedicated flags), writes the resolved snapshot to
``<out>/config.txt`` and a ``<out>/metrics.csv``, and exits with 0 on success,
1 on a configuration or usage error and 2 on a numerical failure (or, for
``reproduce``, a failed criterion).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..envs import UnknownTaskError
from ..policy import Actor, CriticEnsemble, TrueDynamicsModel, WorldModelAdapter, evaluate_policy, pwm_train_policy
from ..worldmodel import NumericalError, WorldModel, WorldModelConfig, config_dict, wm_train
from . import io, metrics, recipes
from .config import ConfigError, dump, resolve

log = logging.getLogger("pwm")

# which config key --steps sets for each subcommand
STEPS_KEY = {
    "collect-data": "data.steps_per_checkpoint",
    "train-wm": "wm.steps",
    "train-policy": "policy.steps",
    "diagnose-esnr": "wm.steps",
    "ablate": "policy.steps",
    "extract-multitask": "policy.steps",
    "reproduce": "policy.steps",
}

SUBCOMMANDS = ("collect-data", "train-wm", "train-policy", "eval", "diagnose-esnr", "ballwall", "ablate",
               "extract-multitask", "reproduce")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pwm", description="World-model policy learning experiments.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        if name == "reproduce":
            sp.add_argument("figure", choices=sorted(recipes.RECIPES))
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int, help="run with this single seed")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: $PWM_OUT_DIR, then out_dir)")
        sp.add_argument("--task", metavar="ID", help="task name (replaces the configured task list)")
        sp.add_argument("--steps", type=int, metavar="N",
                        help="training steps; sets " + STEPS_KEY.get(name, "nothing (rejected)"))
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def _resolve(args) -> dict:
    over = list(args.override)
    if args.seed is not None:
        over.append(("seeds", [args.seed]))
    if args.task is not None:
        over.append(("tasks", [args.task]))
    if args.steps is not None:
        if args.command not in STEPS_KEY:
            raise ConfigError(f"--steps has no meaning for {args.command}")
        if args.steps < 0:
            raise ConfigError("--steps must be >= 0")
        over.append((STEPS_KEY[args.command], args.steps))
    cfg = resolve(args.config, over)
    if args.out:
        cfg["out_dir"] = args.out
    elif os.environ.get("PWM_OUT_DIR"):
        cfg["out_dir"] = os.environ["PWM_OUT_DIR"]
    return cfg


# ---------------------------------------------------------------------------
# component persistence

def save_world_model(path, wm: WorldModel, extra: dict | None = None) -> None:
    io.save_checkpoint(path, "wm", wm.state_arrays(), dict(model=config_dict(wm.cfg), **(extra or {})))


def load_world_model(path) -> WorldModel:
    tag, arrays, conf, _ = io.load_checkpoint(path)
    if tag != "wm":
        raise io.FormatError(f"{path} holds a {tag!r} checkpoint, expected 'wm'")
    wm = WorldModel(WorldModelConfig(**conf["model"]), np.random.default_rng(0))
    wm.load_arrays(arrays)
    return wm


def _model(cfg: dict, registry, task):
    if cfg["policy.model"] == "true":
        return TrueDynamicsModel(task, registry)
    if not cfg["wm.checkpoint"]:
        raise ConfigError("policy.model = 'wm' needs wm.checkpoint")
    wm = load_world_model(cfg["wm.checkpoint"])
    if wm.cfg.obs_dim != registry.obs_dim or wm.cfg.act_dim != registry.act_dim:
        raise ConfigError(f"world model dims ({wm.cfg.obs_dim}, {wm.cfg.act_dim}) do not match tasks {cfg['tasks']}")
    return WorldModelAdapter(wm, task.task_id, registry)


def _load_actor(cfg: dict, model, pcfg) -> Actor:
    actor = Actor(model.feature_dim, model.act_dim, pcfg, np.random.default_rng([cfg["seeds"][0], 2]))
    if cfg["policy.checkpoint"]:
        tag, arrays, _, _ = io.load_checkpoint(cfg["policy.checkpoint"])
        if tag != "actor":
            raise io.FormatError(f"{cfg['policy.checkpoint']} holds a {tag!r} checkpoint, expected 'actor'")
        io.load_named(actor.params, arrays, "actor")
    return actor


# ---------------------------------------------------------------------------
# subcommands

def cmd_collect_data(cfg: dict, out: Path) -> int:
    reg = recipes.build_registry(cfg)
    data = recipes.collect(cfg, reg, cfg["seeds"][0])
    io.save_dataset(out / "dataset.pwmd", data)
    rows = [dict(episode=i, task=int(t), episode_return=float(r))
            for i, (t, r) in enumerate(zip(data.task, data.episode_returns()))]
    recipes.write_rows(out / "metrics.csv", rows, ("episode", "task", "episode_return"))
    log.info("wrote %d episodes to %s", data.num_episodes, out / "dataset.pwmd")
    return 0


def _dataset(cfg: dict, reg):
    if cfg["data.path"]:
        return io.load_dataset(cfg["data.path"])
    log.info("data.path not set; collecting %d episodes per task", cfg["data.episodes"])
    return recipes.collect(cfg, reg, cfg["seeds"][0])


def cmd_train_wm(cfg: dict, out: Path) -> int:
    reg = recipes.build_registry(cfg)
    data = _dataset(cfg, reg)
    rng = np.random.default_rng([cfg["seeds"][0], 1])
    if cfg["wm.checkpoint"]:
        wm = load_world_model(cfg["wm.checkpoint"])
    else:
        wm = WorldModel(recipes.wm_config(cfg, reg), rng)
    tcfg = recipes.wm_train_config(cfg)
    rows = []
    try:
        wm_train(wm, data, tcfg, rng, callback=rows.append)
    finally:
        metrics.write_csv(out / "metrics.csv", rows)
        save_world_model(out / "wm.pwmc", wm, dict(train=config_dict(tcfg)))
    return 0


def cmd_train_policy(cfg: dict, out: Path) -> int:
    reg = recipes.build_registry(cfg)
    task = reg.get(0)
    model = _model(cfg, reg, task)
    pcfg = recipes.pwm_config(cfg)
    rng = np.random.default_rng([cfg["seeds"][0], 2])
    actor = _load_actor(cfg, model, pcfg)
    critics = CriticEnsemble(model.feature_dim, pcfg, rng)
    if cfg["policy.critic_checkpoint"]:
        _, arrays, _, _ = io.load_checkpoint(cfg["policy.critic_checkpoint"])
        io.load_named(critics.params, arrays, "critic")
    if cfg["data.path"]:
        sampler = recipes.dataset_starts(io.load_dataset(cfg["data.path"]))
    elif cfg["policy.model"] == "true":
        sampler = recipes.broad_starts(task, reg)
    else:
        raise ConfigError("training through a world model needs data.path for start states")
    init = recipes.eval_init_states(task, cfg)
    evaluator = lambda a: evaluate_policy(a, model, task, reg, len(init), None, init_states=init)  # noqa: E731
    rows = []
    conf = dict(feature_dim=model.feature_dim, act_dim=model.act_dim, policy=config_dict(pcfg), task=task.name)
    try:
        pwm_train_policy(actor, critics, model, sampler, pcfg, rng, evaluator=evaluator, callback=rows.append)
    finally:
        metrics.write_csv(out / "metrics.csv", rows)
        io.save_checkpoint(out / "actor.pwmc", "actor", io.named_arrays(actor.params, "actor"), conf,
                           rng.bit_generator.state)
        io.save_checkpoint(out / "critic.pwmc", "critic", io.named_arrays(critics.params, "critic"), conf,
                           rng.bit_generator.state)
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    reg = recipes.build_registry(cfg)
    task = reg.get(0)
    if not cfg["policy.checkpoint"]:
        raise ConfigError("eval needs policy.checkpoint")
    model = _model(cfg, reg, task)
    actor = _load_actor(cfg, model, recipes.pwm_config(cfg))
    init = recipes.eval_init_states(task, cfg)
    returns = evaluate_policy(actor, model, task, reg, len(init), None, init_states=init)
    recipes.write_rows(out / "metrics.csv", [dict(episode=i, episode_return=float(r)) for i, r in enumerate(returns)],
                       ("episode", "episode_return"))
    summary = metrics.summarize(returns)
    metrics.write_summary(out / "summary.json", summary)
    print(f"{task.name}: mean {summary['mean']:.2f}  iqm {summary['iqm']:.2f}  over {summary['n']} episodes")
    return 0


def _run_recipe(name: str, metrics_table: str):
    def run(cfg: dict, out: Path, cache=None) -> int:
        rep = recipes.reproduce(name, cfg, out, cache)
        cols, rows = rep.tables[metrics_table]
        recipes.write_rows(out / "metrics.csv", rows, cols)
        for c in rep.checks:
            print(c.line())
        return 0
    return run


def cmd_reproduce(cfg: dict, out: Path, figure: str) -> int:
    rep = recipes.reproduce(figure, cfg, out)
    first = next(iter(rep.tables.values()))
    recipes.write_rows(out / "metrics.csv", first[1], first[0])
    for c in rep.checks:
        print(c.line())
    if not rep.passed:
        print(f"criterion failed: {', '.join(rep.failing())}", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "collect-data": cmd_collect_data,
    "train-wm": cmd_train_wm,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "diagnose-esnr": _run_recipe("fig3", "esnr"),
    "ballwall": _run_recipe("table1c", "gaps"),
    "ablate": _run_recipe("fig6a", "ladder"),
    "extract-multitask": _run_recipe("multitask-toy", "multitask"),
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"pwm: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        cfg = _resolve(args)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump(cfg))
        if args.command == "reproduce":
            return cmd_reproduce(cfg, out, args.figure)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, io.FormatError, UnknownTaskError, FileNotFoundError) as e:
        print(f"pwm: configuration error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as e:
        print(f"pwm: numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
