"""Gradient-quality instrumentation.

Monte-Carlo studies of first-order policy gradients (variance and expected
signal-to-noise ratio), objective landscape sweeps, optimality gaps, and the
one-parameter ball-wall surrogate experiment.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .envs.ballwall import BallWallParams, ballwall_distance
from .neural import Adam, Mlp, MlpSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = ("source", "horizon", "n_samples", "variance_total", "esnr", "n_nonfinite")


def esnr(mean, var) -> float:
    """``sum(mean^2) / sum(var)``; 0 for an all-zero signal, ``inf`` for a noiseless nonzero one."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != var.shape:
        raise ValueError(f"mean and variance shapes differ: {mean.shape} vs {var.shape}")
    num = float(np.sum(mean * mean))
    den = float(np.sum(var))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def sample_mean_var(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and Bessel-corrected variance over axis 0.

    Deviations are taken from the first sample so identical samples give an
    exactly zero variance.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    d = x - x[0]
    s1 = d.sum(axis=0)
    var = (np.sum(d * d, axis=0) - s1 * s1 / n) / (n - 1)
    return x.mean(axis=0), np.maximum(var, 0.0)


@dataclass
class GradientStats:
    source: str
    horizon: int
    n_samples: int
    mean: np.ndarray
    var: np.ndarray
    n_nonfinite: int = 0

    @property
    def esnr(self) -> float:
        return esnr(self.mean, self.var)

    @property
    def variance_total(self) -> float:
        return float(np.sum(self.var))

    def row(self) -> dict:
        return dict(source=self.source, horizon=self.horizon, n_samples=self.n_samples,
                    variance_total=self.variance_total, esnr=self.esnr, n_nonfinite=self.n_nonfinite)


def _flat_grads(params) -> np.ndarray:
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel().astype(np.float64)
                           for p in params])


def reference_actions(policy, reference, obs0: np.ndarray, horizon: int, eps: np.ndarray):
    """Roll ``reference`` forward without gradients; returns per-step policy inputs and actions."""
    with dc.no_grad():
        s = reference.encode(obs0)
        feats, acts = [], []
        for h in range(horizon):
            f = reference.features(s)
            a = policy.sample(f, eps[:, h])
            feats.append(f.data)
            acts.append(a.data)
            s = reference.step(s, a)
    return np.stack(feats, axis=1), np.stack(acts, axis=1)


def action_gradients(model, obs0: np.ndarray, actions: np.ndarray, gamma: float) -> np.ndarray:
    """``dJ/da`` for the fixed action sequence, where ``J = sum_h gamma^h r_h`` under ``model``."""
    leaves = [Tensor(actions[:, h], requires_grad=True) for h in range(actions.shape[1])]
    z = model.encode(obs0)
    total = None
    for h, a in enumerate(leaves):
        r, _ = model.rewards(z, a)
        z = model.step(z, a)
        term = r * (gamma ** h)
        total = term if total is None else total + term
    dc.sum(total).backward()
    return np.stack([a.grad if a.grad is not None else np.zeros_like(a.data) for a in leaves], axis=1)


def policy_vjp(policy, feats: np.ndarray, eps: np.ndarray, grads: Mapping[str, np.ndarray]) -> dict:
    """Per-sample parameter gradients ``sum_h (da_h/dtheta)^T g_h`` for each named action-gradient array."""
    params = list(policy.params)
    out = {k: [] for k in grads}
    n = feats.shape[0]
    for i in range(n):
        act = policy.sample(Tensor(feats[i]), eps[i])
        keys = list(grads)
        for j, k in enumerate(keys):
            for p in params:
                p.grad = None
            dc.sum(act * grads[k][i].astype(act.dtype)).backward(retain_graph=j < len(keys) - 1)
            out[k].append(_flat_grads(params))
    for p in params:
        p.grad = None
    return {k: np.stack(v) for k, v in out.items()}


def sample_noise(seed: int, n: int, horizon: int, act_dim: int, dtype=np.float32) -> np.ndarray:
    """Per-sample noise from generators keyed by (seed, sample index)."""
    return np.stack([np.random.default_rng([seed, i]).standard_normal((horizon, act_dim))
                     for i in range(n)]).astype(dtype)


def grad_mc_study(sources: Mapping[str, object], policy, reference, obs0: np.ndarray, horizons, n_samples: int,
                  seed: int = 0, gamma: float = 0.99, deterministic: bool = False) -> dict:
    """Monte-Carlo first-order gradients of the H-step return for several gradient sources.

    Actions come from rolling ``policy`` through ``reference`` with common
    random numbers, so every source sees the same action sequences; only the
    backward pass differs. Policy inputs are the reference rollout's features,
    treated as constants. ``obs0`` is one start observation (n,) or (1, n).
    Returns ``{source: {H: GradientStats}}``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    obs0 = np.asarray(obs0, dtype=dc.get_default_dtype()).reshape(1, -1)
    starts = np.repeat(obs0, n_samples, axis=0)
    out = {name: {} for name in sources}
    for H in horizons:
        if deterministic:
            eps = np.zeros((n_samples, H, policy.act_dim), dc.get_default_dtype())
        else:
            eps = sample_noise(seed, n_samples, H, policy.act_dim, dc.get_default_dtype())
        feats, acts = reference_actions(policy, reference, starts, H, eps)
        gact = {}
        for name, model in sources.items():
            with np.errstate(all="ignore"):
                gact[name] = action_gradients(model, starts, acts, gamma)
        per_sample = policy_vjp(policy, feats, eps, gact)
        for name, g in per_sample.items():
            ok = np.all(np.isfinite(g), axis=1)
            bad = int((~ok).sum())
            if bad:
                log.warning("%s H=%d: %d non-finite gradient samples excluded", name, H, bad)
            if ok.sum() < 2:
                mean = np.zeros(g.shape[1])
                var = np.full(g.shape[1], np.nan)
            else:
                mean, var = sample_mean_var(g[ok])
            out[name][H] = GradientStats(name, H, int(ok.sum()), mean, var, bad)
    return out


def aggregate_esnr(studies) -> dict:
    """Arithmetic mean of ESNR and total variance over a list of ``grad_mc_study`` results."""
    acc = {}
    for st in studies:
        for name, by_h in st.items():
            for H, s in by_h.items():
                acc.setdefault((name, H), []).append(s)
    out = {}
    for (name, H), items in acc.items():
        es = np.array([s.esnr for s in items])
        out[(name, H)] = dict(source=name, horizon=H, n_samples=int(sum(s.n_samples for s in items)),
                              variance_total=float(np.mean([s.variance_total for s in items])),
                              esnr=float(np.mean(es)), n_nonfinite=int(sum(s.n_nonfinite for s in items)))
    return out


def write_rows(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


# ---------------------------------------------------------------------------
# landscapes and optimality gaps

def landscape_sweep(objectives: Mapping[str, Callable], grid) -> dict:
    """Evaluate every objective on ``grid``; returns aligned columns ``{"theta": ..., name: ...}``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    table = {"theta": grid}
    for name, f in objectives.items():
        table[name] = np.asarray(f(grid), dtype=np.float64).reshape(grid.shape)
    return table


def write_landscape(path, table: dict) -> None:
    cols = list(table)
    rows = [{c: table[c][i] for c in cols} for i in range(len(table["theta"]))]
    write_rows(path, rows, cols)


def brute_force_max(objective: Callable, lo: float, hi: float, resolution: int = 20_001) -> tuple[float, float]:
    if resolution < 10_000:
        raise ValueError("brute-force sweep needs at least 1e4 points")
    grid = np.linspace(lo, hi, resolution)
    vals = np.asarray(objective(grid), dtype=np.float64)
    i = int(np.argmax(vals))
    return float(grid[i]), float(vals[i])


def optimality_gap(objective: Callable, theta_hat: float, lo: float = -math.pi, hi: float = math.pi,
                   resolution: int = 20_001) -> float:
    """``|J(theta*) - J(theta_hat)|`` with ``theta*`` from a dense sweep (maximisation)."""
    _, best = brute_force_max(objective, lo, hi, resolution)
    return abs(best - float(objective(np.asarray(theta_hat))))


# ---------------------------------------------------------------------------
# ball-wall surrogate experiment

@dataclass
class BallWallConfig:
    hidden: tuple = (32, 32)
    lr: float = 2e-3
    epochs: int = 100
    batch_size: int = 50
    n_samples: int = 1000
    descent_lr: float = 1e-2
    descent_steps: int = 1000
    theta0: float = -math.pi
    params: BallWallParams = field(default_factory=BallWallParams)


@dataclass
class BallWallResult:
    activation: str
    model_error: float
    theta_hat: float
    gap: float
    losses: list
    surrogate: Callable


def _surrogate_fn(mlp: Mlp) -> Callable:
    def f(theta):
        th = np.asarray(theta, dtype=np.float64)
        with dc.no_grad():
            out = mlp(Tensor(th.reshape(-1, 1))).data[:, 0]
        return out.reshape(th.shape) if th.ndim else float(out[0])
    return f


def fit_surrogate(activation: str, cfg: BallWallConfig, init_seed: int, data_rng: np.random.Generator):
    """Fit a small MLP to sampled ``(theta, J(theta))`` pairs; returns (mlp, per-epoch losses)."""
    spec = MlpSpec(1, cfg.hidden, 1, hidden_activation=activation, use_layer_norm=False)
    mlp = Mlp(spec, np.random.default_rng(init_seed))
    theta = data_rng.uniform(-math.pi, math.pi, cfg.n_samples)
    target = ballwall_distance(theta, cfg.params)
    opt = Adam(mlp.params, lr=cfg.lr)
    losses = []
    for _ in range(cfg.epochs):
        order = data_rng.permutation(cfg.n_samples)
        tot = 0.0
        for s in range(0, cfg.n_samples, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = dc.mse(dc.reshape(mlp(Tensor(theta[idx, None])), (len(idx),)), target[idx])
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        losses.append(tot / cfg.n_samples)
    return mlp, losses


def surrogate_ascent(mlp: Mlp, theta0: float, lr: float, steps: int) -> float:
    """Adam ascent on the surrogate's output from ``theta0``; theta is kept in [-pi, pi]."""
    theta = Tensor(np.array([[theta0]]), requires_grad=True)
    opt = Adam([theta], lr=lr)
    frozen_state = [p.requires_grad for p in mlp.params]
    for p in mlp.params:
        p.requires_grad = False
    try:
        for _ in range(steps):
            (-dc.sum(mlp(theta))).backward()
            opt.step()
            theta.data = np.clip(theta.data, -math.pi, math.pi)
    finally:
        for p, flag in zip(mlp.params, frozen_state):
            p.requires_grad = flag
    return float(theta.data[0, 0])


def ballwall_experiment(seed: int, cfg: BallWallConfig = BallWallConfig(),
                        activations=("relu", "simnorm")) -> dict:
    """Fit one surrogate per activation from identical initial parameters, ascend each from
    ``theta0`` and report model error (final training MSE) and optimality gap on the true objective."""
    true_j = lambda th: ballwall_distance(th, cfg.params)  # noqa: E731
    out = {}
    for act in activations:
        mlp, losses = fit_surrogate(act, cfg, init_seed=seed, data_rng=np.random.default_rng([seed, 1]))
        theta_hat = surrogate_ascent(mlp, cfg.theta0, cfg.descent_lr, cfg.descent_steps)
        out[act] = BallWallResult(act, losses[-1], theta_hat, optimality_gap(true_j, theta_hat), losses,
                                  _surrogate_fn(mlp))
    return out
