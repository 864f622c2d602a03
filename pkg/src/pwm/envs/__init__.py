"""Differentiable toy systems and the multi-task registry.

Policies act in a normalised box ``[-1, 1]^m``; a task scales actions to
physical units before stepping its dynamics. Observations and actions are
zero-padded to the widest task in a registry so one world model can serve
all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor
from . import acrobot, pendulum
from .acrobot import AcrobotParams, acrobot_energy, acrobot_reward, acrobot_step
from .ballwall import BallWallParams, ballwall_distance
from .pendulum import PendulumParams, pendulum_step

__all__ = [
    "TaskSpec",
    "TaskRegistry",
    "UnknownTaskError",
    "make_task",
    "make_registry",
    "TASK_BUILDERS",
    "AcrobotParams",
    "BallWallParams",
    "PendulumParams",
    "acrobot_step",
    "acrobot_reward",
    "acrobot_energy",
    "pendulum_step",
    "ballwall_distance",
]


class UnknownTaskError(KeyError):
    pass


@dataclass
class TaskSpec:
    name: str
    obs_dim: int
    act_dim: int
    state_dim: int
    episode_length: int
    dynamics: Callable[[Tensor, Tensor], Tensor]
    reward_fn: Callable[[Tensor, Tensor], Tensor]
    observe: Callable[[Tensor], Tensor]
    state_from_obs: Callable[[np.ndarray], np.ndarray]
    init_sampler: Callable[[np.random.Generator, int], np.ndarray]
    state_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None
    action_scale: float = 1.0
    substeps: int = 1
    task_id: int = -1
    params: object = None

    def step(self, state: Tensor, action: Tensor) -> Tensor:
        """Advance by one control step; ``action`` is normalised, native width."""
        u = action * self.action_scale
        for _ in range(self.substeps):
            state = self.dynamics(state, u)
        return state

    def reward(self, state: Tensor, action: Tensor) -> Tensor:
        return self.reward_fn(state, action * self.action_scale)

    def sample_init(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.init_sampler(rng, n)

    def sample_state(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Broad coverage of the state space; falls back to the episode-start distribution."""
        return (self.state_sampler or self.init_sampler)(rng, n)


class TaskRegistry:
    def __init__(self, tasks=()):
        self.tasks: list[TaskSpec] = []
        for t in tasks:
            self.register(t)

    def register(self, task: TaskSpec) -> int:
        task.task_id = len(self.tasks)
        self.tasks.append(task)
        return task.task_id

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def get(self, task_id: int) -> TaskSpec:
        if not isinstance(task_id, (int, np.integer)) or not 0 <= task_id < len(self.tasks):
            raise UnknownTaskError(f"task id {task_id!r} is not registered")
        return self.tasks[int(task_id)]

    def by_name(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise UnknownTaskError(f"task {name!r} is not registered")

    @property
    def obs_dim(self) -> int:
        return max(t.obs_dim for t in self.tasks)

    @property
    def act_dim(self) -> int:
        return max(t.act_dim for t in self.tasks)

    def obs_mask(self, task_id: int) -> np.ndarray:
        return (np.arange(self.obs_dim) < self.get(task_id).obs_dim).astype(np.float32)

    def act_mask(self, task_id: int) -> np.ndarray:
        return (np.arange(self.act_dim) < self.get(task_id).act_dim).astype(np.float32)

    def pad_obs(self, task_id: int, obs):
        return _pad(obs, self.obs_dim - self.get(task_id).obs_dim)

    def pad_action(self, task_id: int, action):
        return _pad(action, self.act_dim - self.get(task_id).act_dim)

    def unpad_obs(self, task_id: int, obs):
        return obs[..., :self.get(task_id).obs_dim]

    def unpad_action(self, task_id: int, action):
        return action[..., :self.get(task_id).act_dim]


def _pad(x, extra: int):
    if extra == 0:
        return x
    if isinstance(x, Tensor):
        return dc.concat([x, dc.zeros((*x.shape[:-1], extra), dtype=x.dtype)], axis=-1)
    x = np.asarray(x)
    return np.concatenate([x, np.zeros((*x.shape[:-1], extra), dtype=x.dtype)], axis=-1)


# ---------------------------------------------------------------------------
# builders

def _pendulum_task(name: str, reward, p: PendulumParams, episode_length: int) -> TaskSpec:
    return TaskSpec(
        name=name, obs_dim=3, act_dim=1, state_dim=2, episode_length=episode_length,
        dynamics=lambda s, u: pendulum.pendulum_step(s, u, p),
        reward_fn=lambda s, u: reward(s, u, p),
        observe=pendulum.pendulum_obs,
        state_from_obs=pendulum.pendulum_state_from_obs,
        init_sampler=pendulum.pendulum_init,
        state_sampler=pendulum.pendulum_broad,
        action_scale=p.max_torque,
        params=p,
    )


def make_pendulum_swingup(p: PendulumParams = PendulumParams(), episode_length: int = 200) -> TaskSpec:
    return _pendulum_task("pendulum-swingup", pendulum.swingup_reward, p, episode_length)


def make_pendulum_spin(p: PendulumParams = PendulumParams(), episode_length: int = 200) -> TaskSpec:
    return _pendulum_task("pendulum-spin", pendulum.spin_reward, p, episode_length)


ACROBOT_INITS = {"hanging": acrobot.acrobot_init, "uniform": acrobot.acrobot_init_uniform}


def make_acrobot(p: AcrobotParams = AcrobotParams(), episode_length: int = 240, substeps: int = 1,
                 init: str = "hanging") -> TaskSpec:
    if init not in ACROBOT_INITS:
        raise ValueError(f"unknown acrobot init {init!r}")
    return TaskSpec(
        name="acrobot", obs_dim=6, act_dim=1, state_dim=4, episode_length=episode_length,
        dynamics=lambda s, u: acrobot.acrobot_step(s, u, p),
        reward_fn=acrobot.acrobot_reward,
        observe=acrobot.acrobot_obs,
        state_from_obs=acrobot.acrobot_state_from_obs,
        init_sampler=ACROBOT_INITS[init],
        state_sampler=acrobot.acrobot_broad,
        action_scale=p.torque_limit,
        substeps=substeps,
        params=p,
    )


TASK_BUILDERS: dict[str, Callable[..., TaskSpec]] = {
    "pendulum-swingup": make_pendulum_swingup,
    "pendulum-spin": make_pendulum_spin,
    "acrobot": make_acrobot,
}


def make_task(name: str, **kw) -> TaskSpec:
    try:
        return TASK_BUILDERS[name](**kw)
    except KeyError:
        raise UnknownTaskError(f"unknown task {name!r}") from None


def make_registry(names) -> TaskRegistry:
    return TaskRegistry(make_task(n) for n in names)
