"""Ball thrown at a wall it sticks to: a one-parameter discontinuous landscape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BallWallParams:
    g: float = 9.81
    v: float = 10.0
    t: float = 2.0
    w: float = 3.0
    h: float = 1.0
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.v <= 0 or self.t <= 0 or self.w <= 0:
            raise ValueError("v, t and w must be positive")


def ballwall_distance(theta, params: BallWallParams = BallWallParams()):
    """Horizontal position at flight time ``t`` for launch angle ``theta``.

    Gravity acts on y only. If the ball reaches the wall plane ``x = w`` before
    ``t`` and is not above height ``h`` there, it sticks and the result is ``w``.
    Accepts scalars or arrays.
    """
    th = np.asarray(theta, dtype=np.float64)
    p = params
    vx = p.v * np.cos(th)
    free = p.x0 + vx * p.t
    with np.errstate(divide="ignore", invalid="ignore"):
        t_contact = np.where(vx > 0, (p.w - p.x0) / vx, np.inf)
    reaches = (t_contact >= 0) & (t_contact <= p.t)
    tc = np.where(reaches, t_contact, 0.0)
    y_contact = p.y0 + p.v * np.sin(th) * tc - 0.5 * p.g * tc * tc
    stuck = reaches & (y_contact <= p.h)
    out = np.where(stuck, p.w, free)
    return float(out) if out.ndim == 0 else out


def distance_bound(params: BallWallParams = BallWallParams()) -> float:
    return max(abs(params.x0) + params.v * params.t, params.w)
