"""First-order actor-critic trained through a frozen differentiable model.

The actor is optimised by backpropagating an H-step imagined return through
the model; the critic ensemble regresses TD(lambda) targets. The model is
anything implementing the small protocol of :class:`WorldModelAdapter`, so the
same trainer runs against the learned world model or the true differentiable
dynamics (the reference used to judge the learned model).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .neural import Adam, Mlp, MlpSpec, symexp, two_hot_decode_diff
from .worldmodel import NumericalError, TrainLog, WorldModel, frozen, params_digest

log = logging.getLogger(__name__)


@dataclass
class PwmConfig:
    horizon: int = 16
    gamma: float = 0.99
    lam: float = 0.95
    batch_size: int = 64
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    actor_clip: float = 1.0
    critic_clip: float = 100.0
    critic_splits: int = 4
    critic_iterations: int = 8
    num_critics: int = 3
    actor_objective: str = "td-n"
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    std_floor: float = 0.24
    std_max: float = 1.0
    std_init: float = 1.0
    # "pseudo" keeps critic values on the same (symlog) scale as the actor's reward terms;
    # "eval" trains the critic on decoded rewards, which mixes scales in the actor objective
    critic_rewards: str = "pseudo"
    target_ema: float | None = None
    steps: int = 10_000
    eval_every: int = 500
    eval_episodes: int = 8

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.horizon < 1 or self.batch_size < 1:
            raise ValueError("horizon and batch_size must be positive")
        if self.actor_objective not in ("td-n", "td-lambda"):
            raise ValueError(f"unknown actor objective {self.actor_objective!r}")
        if self.critic_rewards not in ("eval", "pseudo"):
            raise ValueError(f"unknown critic reward decode {self.critic_rewards!r}")
        if not 0 < self.std_floor <= self.std_init <= self.std_max:
            raise ValueError("need 0 < std_floor <= std_init <= std_max")


# ---------------------------------------------------------------------------
# actor and critics

class Actor:
    """Tanh-bounded mean plus a state-independent, floored standard deviation."""

    def __init__(self, feature_dim: int, act_dim: int, cfg: PwmConfig, rng: np.random.Generator):
        self.spec = MlpSpec(feature_dim, cfg.actor_hidden, act_dim, hidden_activation="mish",
                            use_layer_norm=True, final_scale=0.01)
        self.net = Mlp(self.spec, rng)
        self.log_std = Tensor(np.full(act_dim, math.log(cfg.std_init)), requires_grad=True)
        self.log_std_min = math.log(cfg.std_floor)
        self.log_std_max = math.log(cfg.std_max)
        self.act_dim = act_dim

    @property
    def params(self) -> list[Tensor]:
        return [*self.net.params, self.log_std]

    def mean(self, feat: Tensor) -> Tensor:
        return dc.tanh(self.net(feat))

    def std(self) -> Tensor:
        return dc.exp(dc.clamp(self.log_std, self.log_std_min, self.log_std_max))

    def sample(self, feat: Tensor, eps: np.ndarray | None) -> Tensor:
        """``clip(mean + std * eps, -1, 1)``; ``eps=None`` gives the mean action."""
        mu = self.mean(feat)
        if eps is None:
            return mu
        return dc.clamp(mu + self.std() * eps, -1.0, 1.0)

    def act(self, feat) -> np.ndarray:
        with dc.no_grad():
            return self.mean(feat if isinstance(feat, Tensor) else Tensor(feat)).data


class CriticEnsemble:
    def __init__(self, feature_dim: int, cfg: PwmConfig, rng: np.random.Generator):
        self.members = [
            Mlp(MlpSpec(feature_dim, cfg.critic_hidden, 1, hidden_activation="mish", use_layer_norm=True), rng)
            for _ in range(cfg.num_critics)
        ]

    @property
    def params(self) -> list[Tensor]:
        return [p for m in self.members for p in m.params]

    def stacked_values(self, feat: Tensor) -> Tensor:
        """All members in one pass: (..., d) -> (..., K).

        Member parameters are stacked on the fly, so gradients still land on
        each member's own tensors.
        """
        spec = self.members[0].spec
        P = [m.params for m in self.members]
        h, i = feat, 0
        for layer in range(len(spec.hidden_dims)):
            w = dc.stack([p[i] for p in P], axis=0)
            b = dc.stack([p[i + 1] for p in P], axis=0)
            h = dc.ensemble_linear(h, w, b, shared=layer == 0)
            i += 2
            if spec.use_layer_norm:
                h = dc.layer_norm(h) * dc.stack([p[i] for p in P], axis=0) + dc.stack([p[i + 1] for p in P], axis=0)
                i += 2
            h = dc.mish(h)
        w = dc.stack([p[i] for p in P], axis=0)
        b = dc.stack([p[i + 1] for p in P], axis=0)
        out = dc.ensemble_linear(h, w, b, shared=not spec.hidden_dims)
        return dc.reshape(out, out.shape[:-1])

    def member_values(self, feat: Tensor) -> list[Tensor]:
        return [dc.reshape(m(feat), feat.shape[:-1]) for m in self.members]

    def value(self, feat: Tensor) -> Tensor:
        """Mean over members."""
        return dc.mean(self.stacked_values(feat), axis=-1)


# ---------------------------------------------------------------------------
# models the actor can be trained through

class WorldModelAdapter:
    """Learned latent model for one task id (or one id per batch row)."""

    def __init__(self, wm: WorldModel, task, registry=None):
        self.wm = wm
        self.task = np.asarray(task)
        self.act_dim = wm.cfg.act_dim
        self.feature_dim = wm.cfg.latent_dim
        if registry is not None and self.task.ndim == 0:
            self.mask = registry.act_mask(int(self.task))
        else:
            self.mask = np.ones(self.act_dim, np.float32)
        with dc.no_grad():
            self._e = None if self.task.ndim == 0 else wm.embed(self.task)
            self._e_scalar = wm.embed(int(self.task)) if self.task.ndim == 0 else None

    @property
    def parameters(self):
        return self.wm.params

    def with_tasks(self, task) -> "WorldModelAdapter":
        return WorldModelAdapter(self.wm, task)

    def _e_rows(self, n: int) -> Tensor:
        if self._e is not None:
            return self._e
        return Tensor(np.broadcast_to(self._e_scalar.data, (n, self._e_scalar.shape[0])).copy())

    def _mask(self, a: Tensor) -> Tensor:
        return a if self.mask.all() else a * self.mask

    def encode(self, obs: np.ndarray) -> Tensor:
        with dc.no_grad():
            return self.wm.encode(obs, None, e=self._e_rows(obs.shape[0]))

    def step(self, z: Tensor, a: Tensor) -> Tensor:
        return self.wm.dynamics_step(z, self._mask(a), None, e=self._e_rows(z.shape[0]))

    def rewards(self, z: Tensor, a: Tensor) -> tuple[Tensor, np.ndarray]:
        logits = self.wm.reward_logits(z, self._mask(a), None, e=self._e_rows(z.shape[0]))
        pseudo = two_hot_decode_diff(self.wm.codec, logits)
        return pseudo, symexp(pseudo.data)

    def features(self, z: Tensor) -> Tensor:
        return z

    def obs_features(self, obs: np.ndarray) -> Tensor:
        return self.encode(obs)


class TrueDynamicsModel:
    """The task's own differentiable simulator behind the same interface.

    Latents are true states; features are (padded) observations.
    """

    def __init__(self, task, registry):
        self.task = task
        self.registry = registry
        self.act_dim = registry.act_dim
        self.feature_dim = registry.obs_dim

    @property
    def parameters(self):
        return []

    def encode(self, obs: np.ndarray) -> Tensor:
        obs = self.registry.unpad_obs(self.task.task_id, np.asarray(obs))
        return Tensor(self.task.state_from_obs(obs).astype(dc.get_default_dtype()))

    def _native(self, a: Tensor) -> Tensor:
        return self.registry.unpad_action(self.task.task_id, a)

    def step(self, z: Tensor, a: Tensor) -> Tensor:
        return self.task.step(z, self._native(a))

    def rewards(self, z: Tensor, a: Tensor) -> tuple[Tensor, np.ndarray]:
        r = self.task.reward(z, self._native(a))
        return r, r.data

    def features(self, z: Tensor) -> Tensor:
        return self.registry.pad_obs(self.task.task_id, self.task.observe(z))

    def obs_features(self, obs: np.ndarray) -> Tensor:
        return Tensor(np.asarray(obs, dtype=dc.get_default_dtype()))


# ---------------------------------------------------------------------------
# rollout and objectives

@dataclass
class Rollout:
    z: list  # H+1 latents
    a: list  # H actions
    r: list  # H differentiable (pseudo) rewards, shape (B,)
    r_eval: np.ndarray  # (B, H) evaluation-decoded rewards

    @property
    def horizon(self) -> int:
        return len(self.a)


def actor_rollout(actor: Actor, model, z0: Tensor, horizon: int, rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> Rollout:
    """Imagine ``horizon`` steps on one tape.

    ``eps`` (B, H, m) fixes the reparameterisation noise; if it is None the
    noise is drawn from ``rng``, and if both are None the mean action is used.
    """
    B = z0.shape[0]
    if eps is None and rng is not None:
        eps = rng.standard_normal((B, horizon, actor.act_dim)).astype(z0.dtype)
    zs, acts, rews, evals = [z0], [], [], []
    z = z0
    for h in range(horizon):
        a = actor.sample(model.features(z), None if eps is None else eps[:, h])
        r, r_eval = model.rewards(z, a)
        z = model.step(z, a)
        if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(r.data))):
            raise FloatingPointError(f"non-finite value in imagined rollout at step {h}")
        zs.append(z)
        acts.append(a)
        rews.append(r)
        evals.append(np.asarray(r_eval))
    return Rollout(zs, acts, rews, np.stack(evals, axis=1))


def actor_loss(rollout: Rollout, critics: CriticEnsemble | None, model, gamma: float) -> Tensor:
    """The imagined objective (to be maximised), batch-averaged.

    With the initial latent counted as step 1, rewards of steps 1..H-1 are
    discounted from ``gamma**1`` and the value of step H from ``gamma**H``:
    ``sum_{h=1}^{H-1} gamma^h r[h-1] + gamma^H V(z[H-1])``.
    """
    H = rollout.horizon
    total = None
    for h in range(1, H):
        term = rollout.r[h - 1] * (gamma ** h)
        total = term if total is None else total + term
    if critics is not None:
        term = critics.value(model.features(rollout.z[H - 1])) * (gamma ** H)
        total = term if total is None else total + term
    if total is None:
        return dc.zeros(())
    return dc.mean(total)


def td_lambda_targets(rewards, values, gamma: float, lam: float):
    """TD(lambda) targets for positions 0..H-1.

    ``rewards`` is (B, H) and ``values`` is (B, H+1) holding V(z_0..z_H);
    both may be arrays or tensors. The last position falls back to the
    one-step target.
    """
    H = rewards.shape[1]
    if values.shape[1] != H + 1:
        raise ValueError(f"values must have H+1={H + 1} columns, got {values.shape[1]}")
    tensor = isinstance(rewards, Tensor) or isinstance(values, Tensor)
    g = rewards[:, H - 1] + gamma * values[:, H]
    out = [g]
    for t in range(H - 2, -1, -1):
        g = rewards[:, t] + gamma * ((1 - lam) * values[:, t + 1] + lam * g)
        out.append(g)
    out.reverse()
    return dc.stack(out, axis=1) if tensor else np.stack(out, axis=1)


def actor_loss_td_lambda(rollout: Rollout, critics: CriticEnsemble, model, gamma: float, lam: float) -> Tensor:
    """Batch mean of the TD(lambda) return at the first position, gradients kept."""
    rewards = dc.stack(rollout.r, axis=1)
    values = dc.stack([critics.value(model.features(z)) for z in rollout.z], axis=1)
    return dc.mean(td_lambda_targets(rewards, values, gamma, lam)[:, 0])


def critic_targets(rollout: Rollout, critics: CriticEnsemble, model, cfg: PwmConfig,
                   boot: CriticEnsemble | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Detached (features, targets) pairs for positions 0..H-1, flattened."""
    boot = boot or critics
    with dc.no_grad():
        F = np.stack([model.features(dc.stop_gradient(z)).data for z in rollout.z], axis=1)
        values = boot.value(Tensor(F)).data
    rewards = rollout.r_eval if cfg.critic_rewards == "eval" else np.stack([r.data for r in rollout.r], axis=1)
    targets = td_lambda_targets(rewards.astype(values.dtype), values, cfg.gamma, cfg.lam)
    X = F[:, :-1]
    return X.reshape(-1, X.shape[-1]), targets.reshape(-1)


def critic_update(critics: CriticEnsemble, opts: list[Adam], feats: np.ndarray, targets: np.ndarray,
                  cfg: PwmConfig, rng: np.random.Generator) -> float:
    """Each member regresses the same detached targets on uniformly drawn mini-batches."""
    n = feats.shape[0]
    chunk = max(1, -(-n // cfg.critic_splits))
    losses = []
    for _ in range(cfg.critic_iterations):
        idx = rng.integers(0, n, size=chunk)
        pred = critics.stacked_values(Tensor(feats[idx]))  # (chunk, K)
        y = np.repeat(targets[idx][:, None], pred.shape[1], axis=1)
        sq = dc.mean(dc.square(pred - y), axis=0)  # per-member loss
        dc.sum(sq).backward()
        for opt in opts:
            opt.step()
        step_loss = float(sq.data.sum())
        losses.append(step_loss / len(critics.members))
    return float(np.mean(losses)) if losses else 0.0


# ---------------------------------------------------------------------------
# evaluation

def evaluate_policy(actor: Actor, model, task, registry, episodes: int, rng: np.random.Generator,
                    deterministic: bool = True, init_states: np.ndarray | None = None) -> np.ndarray:
    """True-environment episode returns of the actor (mean actions by default)."""
    state = Tensor(init_states if init_states is not None else task.sample_init(rng, episodes))
    n = state.shape[0]
    total = np.zeros(n)
    with dc.no_grad():
        for _ in range(task.episode_length):
            obs = registry.pad_obs(task.task_id, task.observe(state).data)
            feat = model.obs_features(obs)
            if deterministic:
                act = actor.mean(feat)
            else:
                eps = rng.standard_normal((n, actor.act_dim)).astype(feat.dtype)
                act = actor.sample(feat, eps)
            native = Tensor(registry.unpad_action(task.task_id, act.data))
            total += task.reward(state, native).data
            state = task.step(state, native)
    return total


def random_policy_returns(task, registry, episodes: int, rng: np.random.Generator,
                          init_states: np.ndarray | None = None) -> np.ndarray:
    state = Tensor(init_states if init_states is not None else task.sample_init(rng, episodes))
    total = np.zeros(state.shape[0])
    with dc.no_grad():
        for _ in range(task.episode_length):
            act = Tensor(rng.uniform(-1, 1, size=(state.shape[0], task.act_dim)).astype(state.dtype))
            total += task.reward(state, act).data
            state = task.step(state, act)
    return total


def iqm(x) -> float:
    """Interquartile mean: the mean of the middle 50% of sorted values."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        return float("nan")
    lo, hi = n // 4, n - n // 4
    return float(x[lo:hi].mean())


# ---------------------------------------------------------------------------
# training loop

@dataclass
class PolicyResult:
    actor: Actor
    critics: CriticEnsemble
    log: TrainLog
    evals: list = field(default_factory=list)  # (step, returns array)
    best_eval: float = -np.inf


def _snapshot(params) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params, arrays) -> None:
    for p, a in zip(params, arrays):
        p.data = a.copy()


def pwm_train_policy(actor: Actor, critics: CriticEnsemble, model, start_sampler: Callable, cfg: PwmConfig,
                     rng: np.random.Generator, evaluator: Callable | None = None,
                     steps: int | None = None, model_for_tasks: Callable | None = None,
                     callback: Callable | None = None) -> PolicyResult:
    """Alternate actor ascent through ``model`` and critic regression.

    ``start_sampler(rng, B)`` returns padded observations (and optionally task
    ids, in which case ``model_for_tasks(ids)`` supplies the per-row model).
    ``evaluator(actor)`` returns true-environment episode returns. The model's
    own parameters are frozen for the duration of the call.
    """
    steps = cfg.steps if steps is None else steps
    actor_opt = Adam(actor.params, lr=cfg.actor_lr, clip=cfg.actor_clip)
    critic_opts = [Adam(m.params, lr=cfg.critic_lr, clip=cfg.critic_clip) for m in critics.members]
    boot = None
    if cfg.target_ema is not None:
        boot = CriticEnsemble.__new__(CriticEnsemble)
        boot.members = [Mlp(m.spec, np.random.default_rng(0)) for m in critics.members]
        _restore(boot.params, _snapshot(critics.params))
    result = PolicyResult(actor, critics, TrainLog())
    good = _snapshot(actor.params + critics.params)
    t0 = time.perf_counter()
    model_params = list(model.parameters)
    with frozen(model_params):
        for step in range(steps):
            sample = start_sampler(rng, cfg.batch_size)
            m = model
            if isinstance(sample, tuple):
                obs, tasks = sample
                if model_for_tasks is not None:
                    m = model_for_tasks(tasks)
            else:
                obs = sample
            z0 = m.encode(obs)
            with frozen(critics.params):
                ro = actor_rollout(actor, m, z0, cfg.horizon, rng=rng)
                if cfg.actor_objective == "td-n":
                    obj = actor_loss(ro, critics, m, cfg.gamma)
                else:
                    obj = actor_loss_td_lambda(ro, critics, m, cfg.gamma, cfg.lam)
                value = obj.item()
                if not np.isfinite(value):
                    _restore(actor.params + critics.params, good)
                    raise NumericalError(f"actor objective is {value} at step {step}; restored last good policy")
                (-obj).backward()
            actor_norm = actor_opt.step()
            X, y = critic_targets(ro, critics, m, cfg, boot)
            closs = critic_update(critics, critic_opts, X, y, cfg, rng)
            if boot is not None:
                for pb, pc in zip(boot.params, critics.params):
                    pb.data = (cfg.target_ema * pb.data + (1 - cfg.target_ema) * pc.data).astype(pb.data.dtype)
            row = dict(step=step, wall_clock_s=time.perf_counter() - t0, actor_objective=value,
                       critic_loss=closs, actor_grad_norm=actor_norm)
            if evaluator is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step == steps - 1):
                returns = np.asarray(evaluator(actor))
                result.evals.append((step + 1, returns))
                row.update(eval_reward_mean=float(returns.mean()), eval_reward_iqm=iqm(returns))
                if returns.mean() > result.best_eval:
                    result.best_eval = float(returns.mean())
            if step % 50 == 0:
                good = _snapshot(actor.params + critics.params)
            result.log.append(**row)
            if callback is not None:
                callback(row)
    return result


def model_digest(model) -> str:
    return params_digest(model.parameters)


# ---------------------------------------------------------------------------
# multi-task extraction

def multitask_extract(wm: WorldModel, registry, dataset, task_ids, cfg: PwmConfig, rng: np.random.Generator,
                      mode: str = "per-task", eval_episodes: int | None = None, steps: int | None = None):
    """Extract policies from a shared frozen world model.

    ``mode="per-task"`` trains one actor-critic per task id; ``mode="single"``
    trains one actor-critic on batches mixing every task's start states, with
    the summed step budget. Returns ``{task_id: (actor, critics, eval returns)}``.
    """
    task_ids = [int(t) for t in task_ids]
    for t in task_ids:
        registry.get(t)
        if not np.any(dataset.task == t):
            raise KeyError(f"dataset holds no episodes for task {t}")
    steps = cfg.steps if steps is None else steps
    n_eval = cfg.eval_episodes if eval_episodes is None else eval_episodes
    out = {}
    if mode == "per-task":
        for t in task_ids:
            data_t = dataset.select_tasks(t)
            model = WorldModelAdapter(wm, t, registry)
            actor = Actor(model.feature_dim, model.act_dim, cfg, rng)
            critics = CriticEnsemble(model.feature_dim, cfg, rng)
            pwm_train_policy(actor, critics, model, lambda r, b, d=data_t: d.sample_obs(r, b)[0], cfg, rng,
                             steps=steps)
            out[t] = (actor, critics, evaluate_policy(actor, model, registry.get(t), registry, n_eval, rng))
        return out
    if mode != "single":
        raise ValueError(f"unknown multitask mode {mode!r}")
    data = dataset.select_tasks(task_ids)
    model = WorldModelAdapter(wm, task_ids[0], registry)
    actor = Actor(model.feature_dim, model.act_dim, cfg, rng)
    critics = CriticEnsemble(model.feature_dim, cfg, rng)
    pwm_train_policy(actor, critics, model, lambda r, b: data.sample_obs(r, b), cfg, rng,
                     steps=steps * len(task_ids), model_for_tasks=lambda ids: WorldModelAdapter(wm, ids))
    for t in task_ids:
        m = WorldModelAdapter(wm, t, registry)
        out[t] = (actor, critics, evaluate_policy(actor, m, registry.get(t), registry, n_eval, rng))
    return out
