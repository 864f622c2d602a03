"""Mixed-quality offline data: random episodes plus episodes from partially trained policies."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..data import TrajectoryDataset
from ..diffcore import Tensor
from ..policy import Actor, CriticEnsemble, PwmConfig, TrueDynamicsModel, pwm_train_policy


@dataclass
class BehaviorSchedule:
    """``random_fraction`` of episodes use uniform random actions; the rest are split
    evenly over ``num_checkpoints`` snapshots taken every ``steps_per_checkpoint``
    steps of a reference policy trained through the true dynamics. Snapshots act
    with their mean action plus Gaussian noise of scale ``action_noise``."""

    random_fraction: float = 0.3
    num_checkpoints: int = 5
    steps_per_checkpoint: int = 100
    action_noise: float = 0.3


def rollout_episodes(task, registry, episodes: int, rng: np.random.Generator, actor: Actor | None = None,
                     action_noise: float = 0.0, episode_length: int | None = None) -> TrajectoryDataset:
    """Run ``episodes`` parallel true-environment episodes; ``actor=None`` acts uniformly at random."""
    T = episode_length or task.episode_length
    state = Tensor(task.sample_init(rng, episodes).astype(dc.get_default_dtype()))
    obs = np.zeros((episodes, T + 1, registry.obs_dim), np.float32)
    act = np.zeros((episodes, T, registry.act_dim), np.float32)
    rew = np.zeros((episodes, T), np.float32)
    with dc.no_grad():
        for t in range(T):
            o = registry.pad_obs(task.task_id, task.observe(state).data)
            obs[:, t] = o
            if actor is None:
                a = rng.uniform(-1, 1, size=(episodes, registry.act_dim))
            else:
                a = actor.mean(Tensor(o)).data
                if action_noise:
                    a = np.clip(a + action_noise * rng.standard_normal(a.shape), -1.0, 1.0)
            a = (a * registry.act_mask(task.task_id)).astype(np.float32)
            native = Tensor(registry.unpad_action(task.task_id, a))
            rew[:, t] = task.reward(state, native).data
            act[:, t] = a
            state = task.step(state, native)
        obs[:, T] = registry.pad_obs(task.task_id, task.observe(state).data)
    done = np.zeros_like(rew)
    done[:, -1] = 1.0
    return TrajectoryDataset(obs, act, rew, done, np.full(episodes, task.task_id, np.int64))


def _split(n: int, parts: int) -> list[int]:
    base = [n // parts] * parts
    for i in range(n % parts):
        base[i] += 1
    return base


def collect_dataset(task, registry, episodes: int, rng: np.random.Generator,
                    schedule: BehaviorSchedule = BehaviorSchedule(), policy_cfg: PwmConfig | None = None,
                    episode_length: int | None = None) -> TrajectoryDataset:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    n_random = int(round(schedule.random_fraction * episodes))
    if schedule.num_checkpoints == 0:
        n_random = episodes
    parts = [rollout_episodes(task, registry, n_random, rng, None, episode_length=episode_length)] if n_random else []
    n_policy = episodes - n_random
    checkpoints = []
    if n_policy:
        cfg = policy_cfg or PwmConfig(eval_every=0)
        model = TrueDynamicsModel(task, registry)
        actor = Actor(model.feature_dim, model.act_dim, cfg, rng)
        critics = CriticEnsemble(model.feature_dim, cfg, rng)

        def starts(r, b):
            s = Tensor(task.sample_state(r, b).astype(dc.get_default_dtype()))
            return registry.pad_obs(task.task_id, task.observe(s).data)

        for k, n in enumerate(_split(n_policy, schedule.num_checkpoints)):
            pwm_train_policy(actor, critics, model, starts, cfg, rng, steps=schedule.steps_per_checkpoint)
            checkpoints.append((k + 1) * schedule.steps_per_checkpoint)
            if n:
                parts.append(rollout_episodes(task, registry, n, rng, copy.deepcopy(actor), schedule.action_noise,
                                              episode_length))
    data = TrajectoryDataset.concatenate(parts)
    data.meta = dict(task_ids=[int(task.task_id)], episodes=episodes, random_episodes=n_random,
                     checkpoint_steps=checkpoints, random_fraction=schedule.random_fraction,
                     steps_per_checkpoint=schedule.steps_per_checkpoint)
    return data
