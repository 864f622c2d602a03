"""Experiment recipes shared by the command line and the acceptance suite.

Every recipe takes a resolved flat config (see :mod:`pwm.harness.config`),
runs end to end, writes plot-ready CSVs when given an output directory and
returns a :class:`Report` holding named directional checks.

Seeding: ``seeds[0]`` fixes data collection and world-model training; every
entry of ``seeds`` gets its own policy run on top of those shared artifacts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..data import TrajectoryDataset
from ..diagnostics import (CSV_COLUMNS, BallWallConfig, aggregate_esnr, ballwall_experiment, grad_mc_study,
                           landscape_sweep, write_rows)
from ..diffcore import Tensor
from ..envs import TaskRegistry, make_task
from ..envs.ballwall import BallWallParams, ballwall_distance
from ..policy import (Actor, CriticEnsemble, PolicyResult, PwmConfig, TrueDynamicsModel, WorldModelAdapter,
                      evaluate_policy, pwm_train_policy, random_policy_returns)
from ..worldmodel import WmTrainConfig, WorldModel, WorldModelConfig, config_dict, wm_eval_loss, wm_train
from . import io, metrics
from .collect import BehaviorSchedule, collect_dataset
from .config import dump, section

log = logging.getLogger(__name__)

LADDER = {
    "relu": dict(hidden_activation="relu", latent_activation="none"),
    "mish": dict(hidden_activation="mish", latent_activation="none"),
    "mish+simnorm": dict(hidden_activation="mish", latent_activation="simnorm"),
}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


@dataclass
class Report:
    name: str
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # name -> (columns, rows)
    values: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failing(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def write(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name, (cols, rows) in self.tables.items():
            write_rows(out / f"{name}.csv", rows, cols)
        summary = dict(name=self.name, passed=self.passed, values=self.values,
                       checks=[dict(name=c.name, passed=c.passed, detail=c.detail) for c in self.checks])
        metrics.write_summary(out / "report.json", summary)


# ---------------------------------------------------------------------------
# config -> objects

def build_registry(cfg: dict, tasks=None) -> TaskRegistry:
    names = cfg["tasks"] if tasks is None else tasks
    built = []
    for n in names:
        kw = dict(substeps=cfg["env.acrobot_substeps"], init=cfg["env.acrobot_init"]) if n == "acrobot" else {}
        built.append(make_task(n, **kw))
    return TaskRegistry(built)


def wm_config(cfg: dict, registry: TaskRegistry, **over) -> WorldModelConfig:
    w = section(cfg, "wm")
    kw = dict(obs_dim=registry.obs_dim, act_dim=registry.act_dim, num_tasks=len(registry),
              latent_dim=w["latent_dim"], simplex_dim=w["simplex_dim"], task_dim=w["task_dim"],
              enc_hidden=w["enc_hidden"], dyn_hidden=w["dyn_hidden"], rew_hidden=w["rew_hidden"],
              hidden_activation=w["hidden_activation"], latent_activation=w["latent_activation"],
              num_bins=w["num_bins"], vmin=w["vmin"], vmax=w["vmax"])
    kw.update(over)
    return WorldModelConfig(**kw)


def wm_train_config(cfg: dict, **over) -> WmTrainConfig:
    w = section(cfg, "wm")
    kw = dict(horizon=w["horizon"], gamma=w["gamma"], batch_size=w["batch_size"], steps=w["steps"],
              lr=w["lr"], grad_clip=w["grad_clip"])
    kw.update(over)
    return WmTrainConfig(**kw)


def pwm_config(cfg: dict, **over) -> PwmConfig:
    p = section(cfg, "policy")
    keys = ("horizon", "gamma", "lam", "batch_size", "actor_lr", "critic_lr", "actor_clip", "critic_clip",
            "critic_splits", "critic_iterations", "num_critics", "actor_objective", "actor_hidden",
            "critic_hidden", "std_floor", "std_max", "std_init", "critic_rewards", "steps", "eval_every")
    kw = {k: p[k] for k in keys}
    kw["eval_episodes"] = cfg["eval.episodes"]
    kw.update(over)
    return PwmConfig(**kw)


def behavior_schedule(cfg: dict) -> BehaviorSchedule:
    d = section(cfg, "data")
    return BehaviorSchedule(random_fraction=d["random_fraction"], num_checkpoints=d["num_checkpoints"],
                            steps_per_checkpoint=d["steps_per_checkpoint"], action_noise=d["action_noise"])


# ---------------------------------------------------------------------------
# artifacts

class ArtifactCache:
    """Memoises datasets and trained world models by the config slice that produced them.

    With a ``root`` directory the artifacts are also persisted in the binary
    formats of :mod:`pwm.harness.io` and reused across processes.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root else None
        self.mem: dict = {}

    @staticmethod
    def key(kind: str, spec: dict) -> str:
        blob = json.dumps(spec, sort_keys=True, default=str).encode()
        return f"{kind}-{hashlib.sha256(blob).hexdigest()[:16]}"

    def dataset(self, spec: dict, build) -> TrajectoryDataset:
        k = self.key("data", spec)
        if k in self.mem:
            return self.mem[k]
        path = self.root / f"{k}.pwmd" if self.root else None
        if path is not None and path.exists():
            data = io.load_dataset(path)
        else:
            data = build()
            if path is not None:
                io.save_dataset(path, data)
        self.mem[k] = data
        return data

    def world_model(self, spec: dict, wcfg: WorldModelConfig, build) -> tuple[WorldModel, list]:
        k = self.key("wm", spec)
        if k in self.mem:
            return self.mem[k]
        path = self.root / f"{k}.pwmc" if self.root else None
        if path is not None and path.exists():
            _, arrays, conf, _ = io.load_checkpoint(path)
            wm = WorldModel(wcfg, np.random.default_rng(0))
            wm.load_arrays(arrays)
            item = (wm, conf.get("log", []))
        else:
            item = build()
            if path is not None:
                io.save_checkpoint(path, "wm", item[0].state_arrays(), dict(model=config_dict(wcfg), log=item[1]))
        self.mem[k] = item
        return item


def collect(cfg: dict, registry: TaskRegistry, seed: int, episodes: int | None = None) -> TrajectoryDataset:
    """Mixed-quality data for every task in ``registry`` (``episodes`` per task)."""
    episodes = cfg["data.episodes"] if episodes is None else episodes
    rng = np.random.default_rng([seed, 0])
    pcfg = pwm_config(cfg, eval_every=0)
    parts = [collect_dataset(t, registry, episodes, rng, behavior_schedule(cfg), pcfg) for t in registry]
    data = TrajectoryDataset.concatenate(parts)
    data.meta = dict(task_ids=[t.task_id for t in registry], tasks=[t.name for t in registry],
                     per_task=[p.meta for p in parts], seed=seed)
    return data


def get_dataset(cfg: dict, registry: TaskRegistry, seed: int, cache: ArtifactCache | None = None,
                episodes: int | None = None) -> TrajectoryDataset:
    if cfg.get("data.path"):
        return io.load_dataset(cfg["data.path"])
    episodes = cfg["data.episodes"] if episodes is None else episodes
    spec = dict(tasks=[t.name for t in registry], seed=seed, episodes=episodes, data=section(cfg, "data"),
                policy=section(cfg, "policy"), env=section(cfg, "env"))
    spec["data"].pop("path", None)
    spec["policy"].pop("critic_rewards")  # behaviour policies train on true dynamics, where both decodes agree
    build = lambda: collect(cfg, registry, seed, episodes)  # noqa: E731
    return (cache or ArtifactCache()).dataset(spec, build)


def train_world_model(cfg: dict, registry: TaskRegistry, data: TrajectoryDataset, seed: int,
                      cache: ArtifactCache | None = None, data_tag: str = "", wm_over: dict | None = None,
                      train_over: dict | None = None) -> tuple[WorldModel, list]:
    """Returns (world model, per-step log rows)."""
    wcfg = wm_config(cfg, registry, **(wm_over or {}))
    tcfg = wm_train_config(cfg, **(train_over or {}))

    def build():
        rng = np.random.default_rng([seed, 1])
        wm = WorldModel(wcfg, rng)
        rows = wm_train(wm, data, tcfg, rng).rows
        return wm, [{k: v for k, v in r.items() if k != "wall_clock_s"} for r in rows[::max(1, tcfg.steps // 100)]]

    spec = dict(model=config_dict(wcfg), train=config_dict(tcfg), seed=seed, data=data_tag or data.num_transitions)
    return (cache or ArtifactCache()).world_model(spec, wcfg, build)


def eval_init_states(task, cfg: dict) -> np.ndarray:
    return task.sample_init(np.random.default_rng(cfg["eval.seed"]), cfg["eval.episodes"])


def eval_return(actor: Actor, model, task, registry, cfg: dict) -> float:
    """Mean deterministic return over the fixed evaluation start states."""
    init = eval_init_states(task, cfg)
    return float(evaluate_policy(actor, model, task, registry, len(init), None, init_states=init).mean())


def random_return(task, registry, cfg: dict) -> float:
    init = eval_init_states(task, cfg)
    return float(random_policy_returns(task, registry, len(init), np.random.default_rng(cfg["eval.seed"] + 1),
                                       init_states=init).mean())


def normalized(r: float, r_rand: float, r_ref: float) -> float:
    """Return rescaled so the random policy scores 0 and the reference scores 1."""
    return (r - r_rand) / (r_ref - r_rand)


def broad_starts(task, registry):
    def sample(rng, b):
        s = Tensor(task.sample_state(rng, b).astype(dc.get_default_dtype()))
        return registry.pad_obs(task.task_id, task.observe(s).data)
    return sample


def dataset_starts(data: TrajectoryDataset, task_id: int | None = None):
    d = data if task_id is None else data.select_tasks(task_id)
    return lambda rng, b: d.sample_obs(rng, b)[0]


def train_policy(cfg: dict, model, sampler, task, registry, seed: int, steps: int | None = None,
                 model_for_tasks=None, pcfg: PwmConfig | None = None) -> PolicyResult:
    """One actor-critic run through ``model``; evaluates on ``task`` every ``policy.eval_every`` steps."""
    pcfg = pcfg or pwm_config(cfg)
    rng = np.random.default_rng([seed, 2])
    actor = Actor(model.feature_dim, model.act_dim, pcfg, rng)
    critics = CriticEnsemble(model.feature_dim, pcfg, rng)
    evaluator = None
    if task is not None and pcfg.eval_every:
        init = eval_init_states(task, cfg)
        feat_model = model if model_for_tasks is None else WorldModelAdapter(model.wm, task.task_id, registry)
        evaluator = lambda a: evaluate_policy(a, feat_model, task, registry, len(init), None,  # noqa: E731
                                              init_states=init)
    return pwm_train_policy(actor, critics, model, sampler, pcfg, rng, evaluator=evaluator, steps=steps,
                            model_for_tasks=model_for_tasks)


def train_reference(cfg: dict, task, registry, seed: int, steps: int | None = None) -> PolicyResult:
    """First-order policy trained through the true differentiable dynamics."""
    return train_policy(cfg, TrueDynamicsModel(task, registry), broad_starts(task, registry), task, registry,
                        seed, steps)


def _policy_rows(tag: str, seed: int, result: PolicyResult) -> list:
    return [dict(run=tag, seed=seed, step=s, eval_reward_mean=float(r.mean()), eval_reward_iqm=metrics.iqm(r))
            for s, r in result.evals]


POLICY_CURVE_COLUMNS = ("run", "seed", "step", "eval_reward_mean", "eval_reward_iqm")


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# ---------------------------------------------------------------------------
# ball-wall optimality gap

def ballwall_config(cfg: dict) -> BallWallConfig:
    b = section(cfg, "ballwall")
    return BallWallConfig(hidden=tuple(b["hidden"]), lr=b["lr"], epochs=b["epochs"], batch_size=b["batch_size"],
                          n_samples=b["n_samples"], descent_lr=b["descent_lr"], descent_steps=b["descent_steps"],
                          params=BallWallParams(w=b["wall_distance"], h=b["wall_height"]))


def table1c(cfg: dict, out=None) -> Report:
    """Surrogate fits of the ball-wall objective with ReLU and SimNorm heads."""
    bcfg = ballwall_config(cfg)
    rep = Report("table1c")
    gap_rows, results = [], {}
    for seed in cfg["seeds"]:
        res = ballwall_experiment(seed, bcfg, ("relu", "simnorm"))
        results[seed] = res
        for act, r in res.items():
            gap_rows.append(dict(seed=seed, activation=act, model_error=r.model_error, theta_hat=r.theta_hat,
                                 gap=r.gap))
    grid = np.linspace(-math.pi, math.pi, cfg["ballwall.grid_points"])
    first = results[cfg["seeds"][0]]
    table = landscape_sweep({"true": lambda th: ballwall_distance(th, bcfg.params),
                             **{f"surrogate_{a}": r.surrogate for a, r in first.items()}}, grid)
    rows = [{c: table[c][i] for c in table} for i in range(grid.size)]
    rep.tables["landscape"] = (list(table), rows)
    rep.tables["gaps"] = (("seed", "activation", "model_error", "theta_hat", "gap"), gap_rows)

    def med(act, key):
        return float(np.median([getattr(results[s][act], key) for s in results]))

    g_r, g_s, e_r, e_s = med("relu", "gap"), med("simnorm", "gap"), med("relu", "model_error"), \
        med("simnorm", "model_error")
    rep.values = dict(median_gap_relu=g_r, median_gap_simnorm=g_s, median_error_relu=e_r,
                      median_error_simnorm=e_s)
    rep.checks.append(Check("gap simnorm < relu", g_s < g_r, f"median gap {_fmt(g_s)} vs {_fmt(g_r)}"))
    rep.checks.append(Check("error simnorm > relu", e_s > e_r, f"median model error {_fmt(e_s)} vs {_fmt(e_r)}"))
    if out is not None:
        rep.write(out)
    return rep


# ---------------------------------------------------------------------------
# gradient signal-to-noise on the acrobot

def fig3(cfg: dict, out=None, cache: ArtifactCache | None = None) -> Report:
    """Monte-Carlo gradient variance and ESNR through the true dynamics and two learned models.

    The models differ only in their training horizon. A reference policy is
    trained through the true dynamics and snapshotted ``diag.checkpoints``
    times; each snapshot is studied from ``diag.start_states`` dataset states.
    """
    reg = build_registry(cfg, ["acrobot"])
    task = reg.get(0)
    seed = cfg["seeds"][0]
    data = get_dataset(cfg, reg, seed, cache, episodes=cfg["diag.episodes"])
    wm_horizons = [int(h) for h in cfg["diag.wm_horizons"]]
    sources = {"true": TrueDynamicsModel(task, reg)}
    wm_rows = []
    for H in wm_horizons:
        wm, rows = train_world_model(cfg, reg, data, seed, cache, data_tag=f"acrobot-{seed}",
                                     train_over=dict(horizon=H))
        sources[f"wm{H}"] = WorldModelAdapter(wm, 0, reg)
        wm_rows += [dict(model=f"wm{H}", **r) for r in rows]
    pcfg = pwm_config(cfg, eval_every=0)
    rng = np.random.default_rng([seed, 3])
    actor = Actor(sources["true"].feature_dim, reg.act_dim, pcfg, rng)
    critics = CriticEnsemble(sources["true"].feature_dim, pcfg, rng)
    snapshots = []
    for _ in range(cfg["diag.checkpoints"]):
        pwm_train_policy(actor, critics, sources["true"], broad_starts(task, reg), pcfg, rng,
                         steps=cfg["diag.checkpoint_steps"])
        snapshots.append(copy.deepcopy(actor))
    obs, _ = data.sample_obs(np.random.default_rng([seed, 4]), cfg["diag.start_states"])
    horizons = [int(h) for h in cfg["diag.horizons"]]
    studies = []
    for ci, snap in enumerate(snapshots):
        per = [grad_mc_study(sources, snap, sources["true"], obs[si], horizons, cfg["diag.n_samples"],
                             seed=si, gamma=cfg["diag.gamma"]) for si in range(len(obs))]
        studies.append(per)
    overall = aggregate_esnr([s for per in studies for s in per])
    rep = Report("fig3")
    rep.tables["esnr"] = (CSV_COLUMNS, [overall[k] for k in sorted(overall, key=lambda k: (k[1], k[0]))])
    ck_rows = []
    for ci, per in enumerate(studies):
        agg = aggregate_esnr(per)
        ck_rows += [dict(checkpoint=ci, **agg[k]) for k in sorted(agg, key=lambda k: (k[1], k[0]))]
    rep.tables["esnr_checkpoints"] = (("checkpoint", *CSV_COLUMNS), ck_rows)
    rep.tables["wm_train"] = (("model", "step", "loss", "consistency_loss", "reward_loss"), wm_rows)

    Hmax = max(horizons)
    hi, lo = f"wm{max(wm_horizons)}", f"wm{min(wm_horizons)}"
    var_votes, esnr_votes = [], []
    for ci in range(len(studies)):
        at = {r["source"]: r for r in ck_rows if r["checkpoint"] == ci and r["horizon"] == Hmax}
        var_votes.append(at[hi]["variance_total"] < at["true"]["variance_total"])
        esnr_votes.append(at[hi]["esnr"] > at[lo]["esnr"] > at["true"]["esnr"])
        rep.values[f"checkpoint{ci}"] = {s: dict(esnr=r["esnr"], variance_total=r["variance_total"])
                                         for s, r in at.items()}
    need = len(studies) // 2 + 1
    fmt = lambda key: ", ".join(f"{s}={_fmt(overall[(s, Hmax)][key])}" for s in sources)  # noqa: E731
    rep.checks.append(Check(f"Var({hi}) < Var(true) at H={Hmax}", sum(var_votes) >= need,
                            f"{sum(var_votes)}/{len(var_votes)} checkpoints; mean variance {fmt('variance_total')}"))
    rep.checks.append(Check(f"ESNR({hi}) > ESNR({lo}) > ESNR(true) at H={Hmax}", sum(esnr_votes) >= need,
                            f"{sum(esnr_votes)}/{len(esnr_votes)} checkpoints; mean ESNR {fmt('esnr')}"))
    if out is not None:
        rep.write(out)
    return rep


# ---------------------------------------------------------------------------
# pendulum: learned model vs true dynamics

def _pendulum_setup(cfg: dict, cache):
    reg = build_registry(cfg, ["pendulum-swingup"])
    seed = cfg["seeds"][0]
    data = get_dataset(cfg, reg, seed, cache)
    return reg, reg.get(0), seed, data


def pendulum_parity(cfg: dict, out=None, cache: ArtifactCache | None = None) -> Report:
    """Policy extracted from a learned world model vs one trained through the true dynamics."""
    reg, task, seed0, data = _pendulum_setup(cfg, cache)
    wm, wm_rows = train_world_model(cfg, reg, data, seed0, cache, data_tag=f"pendulum-{seed0}")
    model = WorldModelAdapter(wm, 0, reg)
    r_rand = random_return(task, reg, cfg)
    ref, pwm, curves = [], [], []
    for seed in cfg["seeds"]:
        res = train_reference(cfg, task, reg, seed)
        ref.append(eval_return(res.actor, TrueDynamicsModel(task, reg), task, reg, cfg))
        curves += _policy_rows("true-dynamics", seed, res)
        res = train_policy(cfg, model, dataset_starts(data), task, reg, seed)
        pwm.append(eval_return(res.actor, model, task, reg, cfg))
        curves += _policy_rows("world-model", seed, res)
    r_ref, r_pwm = float(np.median(ref)), float(np.median(pwm))
    score = normalized(r_pwm, r_rand, r_ref)
    rep = Report("pendulum-parity", values=dict(random=r_rand, reference=ref, world_model=pwm,
                                                 median_reference=r_ref, median_world_model=r_pwm,
                                                 normalized=score))
    rep.tables["final"] = (("seed", "reference", "world_model"),
                           [dict(seed=s, reference=a, world_model=b) for s, a, b in zip(cfg["seeds"], ref, pwm)])
    rep.tables["policy_curves"] = (POLICY_CURVE_COLUMNS, curves)
    rep.tables["wm_train"] = (("step", "loss", "consistency_loss", "reward_loss"), wm_rows)
    rep.checks.append(Check("world-model policy >= 90% of true-dynamics reference", score >= 0.9,
                            f"median {_fmt(r_pwm)} vs reference {_fmt(r_ref)} (random {_fmt(r_rand)}); "
                            f"normalized {score:.3f}"))
    if out is not None:
        rep.write(out)
    return rep


# ---------------------------------------------------------------------------
# regularisation ladder

def fig6a(cfg: dict, out=None, cache: ArtifactCache | None = None, variants=None) -> Report:
    """World models of increasing regularisation: held-out loss vs downstream policy reward."""
    reg, task, seed0, data = _pendulum_setup(cfg, cache)
    variants = list(variants or cfg["ablate.variants"])
    losses, rewards, curves = {}, {}, []
    for v in variants:
        wm, _ = train_world_model(cfg, reg, data, seed0, cache, data_tag=f"pendulum-{seed0}", wm_over=LADDER[v])
        losses[v] = wm_eval_loss(wm, data, cfg["wm.horizon"], cfg["wm.gamma"],
                                 np.random.default_rng([seed0, 5]), batches=8)["loss"]
        model = WorldModelAdapter(wm, 0, reg)
        rewards[v] = []
        for seed in cfg["seeds"]:
            res = train_policy(cfg, model, dataset_starts(data), task, reg, seed)
            rewards[v].append(eval_return(res.actor, model, task, reg, cfg))
            curves += _policy_rows(v, seed, res)
    med = {v: float(np.median(rewards[v])) for v in variants}
    rep = Report("fig6a", values=dict(wm_loss=losses, rewards=rewards, median_reward=med))
    rep.tables["ladder"] = (("variant", "wm_loss", "median_reward"),
                            [dict(variant=v, wm_loss=losses[v], median_reward=med[v]) for v in variants])
    rep.tables["policy_curves"] = (POLICY_CURVE_COLUMNS, curves)
    loss_ok = all(losses[a] <= losses[b] for a, b in zip(variants, variants[1:]))
    reward_ok = all(med[a] <= med[b] for a, b in zip(variants, variants[1:]))
    rep.checks.append(Check("wm loss increases along the ladder", loss_ok,
                            ", ".join(f"{v}={_fmt(losses[v])}" for v in variants)))
    rep.checks.append(Check("median policy reward increases along the ladder", reward_ok,
                            ", ".join(f"{v}={_fmt(med[v])}" for v in variants)))
    if out is not None:
        rep.write(out)
    return rep


# ---------------------------------------------------------------------------
# multi-task extraction

def multitask_toy(cfg: dict, out=None, cache: ArtifactCache | None = None) -> Report:
    """Shared two-task world model: per-task extraction, one mixed policy, and single-task baselines.

    Scores are normalised per task between the random policy (0) and the
    median single-task-model baseline (1).
    """
    names = list(cfg["multitask.tasks"])
    reg = build_registry(cfg, names)
    seed0 = cfg["seeds"][0]
    data = get_dataset(cfg, reg, seed0, cache)
    shared, _ = train_world_model(cfg, reg, data, seed0, cache, data_tag=f"multitask-{seed0}")
    ids = [t.task_id for t in reg]
    base, per_task, single, r_rand, curves = {}, {}, {}, {}, []
    for t in ids:
        task = reg.get(t)
        r_rand[t] = random_return(task, reg, cfg)
        own, _ = train_world_model(cfg, reg, data.select_tasks(t), seed0, cache, data_tag=f"multitask-{seed0}-only{t}")
        m_own = WorldModelAdapter(own, t, reg)
        m_shared = WorldModelAdapter(shared, t, reg)
        base[t], per_task[t] = [], []
        for seed in cfg["seeds"]:
            res = train_policy(cfg, m_own, dataset_starts(data, t), task, reg, seed)
            base[t].append(eval_return(res.actor, m_own, task, reg, cfg))
            curves += _policy_rows(f"{task.name}/single-task-model", seed, res)
            res = train_policy(cfg, m_shared, dataset_starts(data, t), task, reg, seed)
            per_task[t].append(eval_return(res.actor, m_shared, task, reg, cfg))
            curves += _policy_rows(f"{task.name}/per-task", seed, res)
    pcfg = pwm_config(cfg)
    mixed = WorldModelAdapter(shared, ids[0], reg)
    for t in ids:
        single[t] = []
    for seed in cfg["seeds"]:
        res = train_policy(cfg, mixed, lambda r, b: data.sample_obs(r, b), None, reg, seed,
                           steps=pcfg.steps * len(ids), model_for_tasks=lambda tasks: WorldModelAdapter(shared, tasks),
                           pcfg=pcfg)
        for t in ids:
            m_t = WorldModelAdapter(shared, t, reg)
            single[t].append(eval_return(res.actor, m_t, reg.get(t), reg, cfg))
    rows, norm_per, norm_single = [], {}, {}
    for t in ids:
        ref = float(np.median(base[t]))
        norm_per[t] = normalized(float(np.median(per_task[t])), r_rand[t], ref)
        norm_single[t] = normalized(float(np.median(single[t])), r_rand[t], ref)
        rows.append(dict(task=reg.get(t).name, random=r_rand[t], single_task_model=ref,
                         per_task=float(np.median(per_task[t])), single_policy=float(np.median(single[t])),
                         per_task_normalized=norm_per[t], single_policy_normalized=norm_single[t]))
    rep = Report("multitask-toy", values=dict(rows=rows))
    rep.tables["multitask"] = (tuple(rows[0]), rows)
    rep.tables["policy_curves"] = (POLICY_CURVE_COLUMNS, curves)
    for t in ids:
        rep.checks.append(Check(f"{reg.get(t).name}: per-task policy >= 80% of single-task-model baseline",
                                norm_per[t] >= 0.8, f"normalized {norm_per[t]:.3f}"))
    mp, ms = float(np.mean(list(norm_per.values()))), float(np.mean(list(norm_single.values())))
    rep.checks.append(Check("single multi-task policy < per-task policies", ms < mp,
                            f"mean normalized {ms:.3f} vs {mp:.3f}"))
    if out is not None:
        rep.write(out)
    return rep


RECIPES = {
    "table1c": table1c,
    "fig3": fig3,
    "pendulum-parity": pendulum_parity,
    "fig6a": fig6a,
    "multitask-toy": multitask_toy,
}


def reproduce(figure: str, cfg: dict, out=None, cache: ArtifactCache | None = None) -> Report:
    if figure not in RECIPES:
        raise KeyError(f"unknown figure {figure!r}; choose from {sorted(RECIPES)}")
    fn = RECIPES[figure]
    rep = fn(cfg, out) if figure == "table1c" else fn(cfg, out, cache)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "config.txt").write_text(dump(cfg))
    return rep
