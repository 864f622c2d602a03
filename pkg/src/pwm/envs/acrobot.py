"""Two-link underactuated pendulum with torque only at the elbow.

Both angles are absolute and measured from the upward vertical, so the
upright pose is ``theta1 = theta2 = 0`` and hanging at rest is
``theta1 = theta2 = pi``. Links are massless rods with point masses at their
ends; no friction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor
from .pendulum import wrap_angle


@dataclass(frozen=True)
class AcrobotParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    dt: float = 0.01
    torque_limit: float = 1.0


def _accel(th1, th2, w1, w2, tau, p: AcrobotParams):
    delta = th1 - th2
    cd, sd = dc.cos(delta), dc.sin(delta)
    m12 = p.m2 * p.l1 * p.l2
    a11 = (p.m1 + p.m2) * p.l1 ** 2
    a22 = p.m2 * p.l2 ** 2
    a12 = m12 * cd
    rhs1 = -tau - m12 * dc.square(w2) * sd + (p.m1 + p.m2) * p.g * p.l1 * dc.sin(th1)
    rhs2 = tau + m12 * dc.square(w1) * sd + p.m2 * p.g * p.l2 * dc.sin(th2)
    det = a11 * a22 - dc.square(a12)
    acc1 = (a22 * rhs1 - a12 * rhs2) / det
    acc2 = (a11 * rhs2 - a12 * rhs1) / det
    return acc1, acc2


def acrobot_step(state: Tensor, torque: Tensor, p: AcrobotParams = AcrobotParams(),
                 dt: float | None = None) -> Tensor:
    """Semi-implicit Euler. ``state`` is (..., 4) ``[th1, th2, w1, w2]``, ``torque`` (..., 1)."""
    dt = p.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not np.all(np.isfinite(state.data)):
        raise FloatingPointError("acrobot_step: non-finite state")
    th1, th2, w1, w2 = (state[..., i] for i in range(4))
    tau = torque[..., 0]
    acc1, acc2 = _accel(th1, th2, w1, w2, tau, p)
    w1n = w1 + acc1 * dt
    w2n = w2 + acc2 * dt
    return dc.stack([th1 + w1n * dt, th2 + w2n * dt, w1n, w2n], axis=-1)


def acrobot_energy(state, p: AcrobotParams = AcrobotParams()) -> np.ndarray:
    """Kinetic plus potential energy (potential zero at the pivot height)."""
    s = np.asarray(state.data if isinstance(state, Tensor) else state, dtype=np.float64)
    th1, th2, w1, w2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    kin = (0.5 * (p.m1 + p.m2) * p.l1 ** 2 * w1 ** 2 + 0.5 * p.m2 * p.l2 ** 2 * w2 ** 2
           + p.m2 * p.l1 * p.l2 * w1 * w2 * np.cos(th1 - th2))
    pot = (p.m1 + p.m2) * p.g * p.l1 * np.cos(th1) + p.m2 * p.g * p.l2 * np.cos(th2)
    return kin + pot


def acrobot_reward(state: Tensor, action: Tensor | None = None) -> Tensor:
    """``-th1^2 - th2^2 - 0.1 * w2^2`` with angles wrapped to [-pi, pi)."""
    th1 = wrap_angle(state[..., 0])
    th2 = wrap_angle(state[..., 1])
    return -(dc.square(th1) + dc.square(th2) + 0.1 * dc.square(state[..., 3]))


def acrobot_obs(state: Tensor) -> Tensor:
    th1, th2 = state[..., 0], state[..., 1]
    return dc.stack([dc.cos(th1), dc.sin(th1), dc.cos(th2), dc.sin(th2), state[..., 2], state[..., 3]],
                    axis=-1)


def acrobot_state_from_obs(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs)
    return np.stack([np.arctan2(obs[..., 1], obs[..., 0]), np.arctan2(obs[..., 3], obs[..., 2]),
                     obs[..., 4], obs[..., 5]], axis=-1)


def acrobot_init(rng: np.random.Generator, n: int) -> np.ndarray:
    """Near the hanging rest pose with small perturbations."""
    th = np.pi + rng.uniform(-0.3, 0.3, size=(n, 2))
    w = rng.uniform(-0.3, 0.3, size=(n, 2))
    return np.concatenate([th, w], axis=-1)


def acrobot_init_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform link angles, small velocities: most starts carry enough energy to tumble."""
    th = rng.uniform(-np.pi, np.pi, size=(n, 2))
    w = rng.uniform(-0.3, 0.3, size=(n, 2))
    return np.concatenate([th, w], axis=-1)


def acrobot_broad(rng: np.random.Generator, n: int) -> np.ndarray:
    th = rng.uniform(-np.pi, np.pi, size=(n, 2))
    w = rng.uniform(-3.0, 3.0, size=(n, 2))
    return np.concatenate([th, w], axis=-1)
