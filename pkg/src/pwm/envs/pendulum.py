"""Torque-limited single pendulum, differentiable end to end.

State is ``[theta, theta_dot]`` with ``theta = 0`` upright; observations are
``[cos theta, sin theta, theta_dot]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor


@dataclass(frozen=True)
class PendulumParams:
    g: float = 9.81
    m: float = 1.0
    l: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0


def wrap_angle(theta: Tensor) -> Tensor:
    """Map to [-pi, pi); the subtracted multiple of 2*pi is treated as a constant."""
    k = np.round(theta.data / (2 * np.pi))
    return theta - (2 * np.pi) * k


def pendulum_step(state: Tensor, torque: Tensor, p: PendulumParams = PendulumParams()) -> Tensor:
    """Semi-implicit Euler step. ``state`` is (..., 2), ``torque`` is (..., 1)."""
    th, thdot = state[..., 0], state[..., 1]
    u = dc.clamp(torque[..., 0], -p.max_torque, p.max_torque)
    acc = (3 * p.g / (2 * p.l)) * dc.sin(th) + (3.0 / (p.m * p.l ** 2)) * u
    new_thdot = dc.clamp(thdot + acc * p.dt, -p.max_speed, p.max_speed)
    new_th = th + new_thdot * p.dt
    return dc.stack([new_th, new_thdot], axis=-1)


def swingup_reward(state: Tensor, torque: Tensor, p: PendulumParams = PendulumParams()) -> Tensor:
    u = dc.clamp(torque[..., 0], -p.max_torque, p.max_torque)
    th = wrap_angle(state[..., 0])
    return -(dc.square(th) + 0.1 * dc.square(state[..., 1]) + 0.001 * dc.square(u))


def spin_reward(state: Tensor, torque: Tensor, p: PendulumParams = PendulumParams(),
                target_speed: float = 5.0) -> Tensor:
    u = dc.clamp(torque[..., 0], -p.max_torque, p.max_torque)
    return -(0.1 * dc.square(state[..., 1] - target_speed) + 0.001 * dc.square(u))


def pendulum_obs(state: Tensor) -> Tensor:
    th = state[..., 0]
    return dc.stack([dc.cos(th), dc.sin(th), state[..., 1]], axis=-1)


def pendulum_state_from_obs(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs)
    return np.stack([np.arctan2(obs[..., 1], obs[..., 0]), obs[..., 2]], axis=-1)


def pendulum_init(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-1.0, 1.0, n)], axis=-1)


def pendulum_broad(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-6.0, 6.0, n)], axis=-1)
