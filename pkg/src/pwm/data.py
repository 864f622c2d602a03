"""Trajectory storage: fixed offline datasets and the FIFO replay buffer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Batch:
    """H-step windows: ``obs`` (B, H+1, n), ``act`` (B, H, m), ``rew`` (B, H), ``task`` (B,)."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    task: np.ndarray

    @property
    def horizon(self) -> int:
        return self.act.shape[1]

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class TrajectoryDataset:
    """Equal-length episodes. ``obs`` holds T+1 observations per episode.

    Observations and actions are stored padded to the registry's widths.
    """

    obs: np.ndarray  # (E, T+1, n)
    act: np.ndarray  # (E, T, m)
    rew: np.ndarray  # (E, T)
    done: np.ndarray  # (E, T)
    task: np.ndarray  # (E,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        e, t1 = self.obs.shape[:2]
        if self.act.shape[:2] != (e, t1 - 1) or self.rew.shape != (e, t1 - 1):
            raise ValueError("inconsistent dataset array shapes")
        if self.done.shape != self.rew.shape or self.task.shape != (e,):
            raise ValueError("inconsistent dataset array shapes")

    @property
    def num_episodes(self) -> int:
        return self.obs.shape[0]

    @property
    def episode_length(self) -> int:
        return self.act.shape[1]

    @property
    def num_transitions(self) -> int:
        return self.act.shape[0] * self.act.shape[1]

    def episode_returns(self) -> np.ndarray:
        return self.rew.sum(axis=1)

    def select_tasks(self, task_ids) -> "TrajectoryDataset":
        keep = np.isin(self.task, np.atleast_1d(task_ids))
        if not keep.any():
            raise KeyError(f"no episodes for task(s) {task_ids}")
        return TrajectoryDataset(self.obs[keep], self.act[keep], self.rew[keep], self.done[keep],
                                 self.task[keep], dict(self.meta))

    def take_transitions(self, n: int) -> "TrajectoryDataset":
        """Leading episodes holding at least ``n`` transitions."""
        k = max(1, -(-n // self.episode_length))
        return TrajectoryDataset(self.obs[:k], self.act[:k], self.rew[:k], self.done[:k], self.task[:k],
                                 dict(self.meta))

    def sample_windows(self, rng: np.random.Generator, batch_size: int, horizon: int) -> Batch:
        """Uniform episode choice and uniform start offset within the episode."""
        if self.episode_length < horizon:
            raise ValueError(f"episodes of length {self.episode_length} are shorter than horizon {horizon}")
        ep = rng.integers(0, self.num_episodes, size=batch_size)
        start = rng.integers(0, self.episode_length - horizon + 1, size=batch_size)
        steps = start[:, None] + np.arange(horizon)
        return Batch(
            obs=self.obs[ep[:, None], np.concatenate([steps, steps[:, -1:] + 1], axis=1)],
            act=self.act[ep[:, None], steps],
            rew=self.rew[ep[:, None], steps],
            task=self.task[ep],
        )

    def sample_obs(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform (episode, time) start states; returns (obs, task)."""
        ep = rng.integers(0, self.num_episodes, size=batch_size)
        t = rng.integers(0, self.episode_length, size=batch_size)
        return self.obs[ep, t], self.task[ep]

    @staticmethod
    def concatenate(parts) -> "TrajectoryDataset":
        parts = list(parts)
        return TrajectoryDataset(
            obs=np.concatenate([p.obs for p in parts]),
            act=np.concatenate([p.act for p in parts]),
            rew=np.concatenate([p.rew for p in parts]),
            done=np.concatenate([p.done for p in parts]),
            task=np.concatenate([p.task for p in parts]),
            meta=dict(parts[0].meta),
        )


class ReplayBuffer:
    """FIFO ring of transitions, sampled as contiguous same-episode windows."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim), np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), np.float32)
        self.act = np.zeros((capacity, act_dim), np.float32)
        self.rew = np.zeros(capacity, np.float32)
        self.task = np.zeros(capacity, np.int64)
        self.episode = np.zeros(capacity, np.int64)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, obs, act, rew, next_obs, task, episode) -> None:
        """Add a batch of transitions (leading axis = transitions)."""
        obs = np.atleast_2d(obs)
        n = obs.shape[0]
        idx = (self.inserted + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = np.atleast_2d(act)
        self.rew[idx] = np.atleast_1d(rew)
        self.next_obs[idx] = np.atleast_2d(next_obs)
        self.task[idx] = np.broadcast_to(task, (n,))
        self.episode[idx] = np.broadcast_to(episode, (n,))
        self.inserted += n

    def _chronological(self) -> np.ndarray:
        n = len(self)
        start = self.inserted - n
        return (start + np.arange(n)) % self.capacity

    def valid_starts(self, horizon: int) -> np.ndarray:
        order = self._chronological()
        if len(order) < horizon:
            return np.zeros(0, np.int64)
        ep = self.episode[order]
        same = np.ones(len(order) - horizon + 1, bool)
        for k in range(1, horizon):
            same &= ep[k:len(order) - horizon + 1 + k] == ep[:len(order) - horizon + 1]
        return np.flatnonzero(same)

    def sample_windows(self, rng: np.random.Generator, batch_size: int, horizon: int) -> Batch:
        starts = self.valid_starts(horizon)
        if starts.size == 0:
            raise ValueError("replay buffer holds no window of the requested horizon")
        order = self._chronological()
        pick = starts[rng.integers(0, starts.size, size=batch_size)]
        rows = order[pick[:, None] + np.arange(horizon)]
        obs = np.concatenate([self.obs[rows], self.next_obs[rows[:, -1:]]], axis=1)
        return Batch(obs=obs, act=self.act[rows], rew=self.rew[rows], task=self.task[rows[:, 0]])
