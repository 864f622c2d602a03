"""Latent world model: encoder, latent dynamics and reward head, conditioned on task embeddings.

The encoder and dynamics end in SimNorm (unless ablated), so every latent is a
concatenation of probability simplices. Training is autoregressive over
H-step windows with stop-gradient encoder targets and a two-hot reward
cross-entropy.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import Batch, ReplayBuffer, TrajectoryDataset
from .diffcore import Tensor
from .envs import UnknownTaskError
from .neural import Adam, Mlp, MlpSpec, TwoHotCodec, two_hot_encode

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss; parameters were rolled back."""


@dataclass(frozen=True)
class WorldModelConfig:
    obs_dim: int
    act_dim: int
    num_tasks: int = 1
    latent_dim: int = 64
    simplex_dim: int = 8
    task_dim: int = 16
    enc_hidden: tuple = (128,)
    dyn_hidden: tuple = (128, 128)
    rew_hidden: tuple = (128, 128)
    hidden_activation: str = "mish"
    latent_activation: str = "simnorm"
    use_layer_norm: bool = True
    num_bins: int = 101
    vmin: float = -10.0
    vmax: float = 10.0

    def __post_init__(self):
        for k in ("enc_hidden", "dyn_hidden", "rew_hidden"):
            object.__setattr__(self, k, tuple(int(h) for h in getattr(self, k)))
        if self.latent_activation == "simnorm" and self.latent_dim % self.simplex_dim:
            raise ValueError("latent_dim must be divisible by simplex_dim")

    @classmethod
    def large_shape(cls, obs_dim: int, act_dim: int, num_tasks: int = 1) -> "WorldModelConfig":
        """Full-size layer widths; only meant for structure checks."""
        return cls(obs_dim=obs_dim, act_dim=act_dim, num_tasks=num_tasks, latent_dim=768, task_dim=96,
                   enc_hidden=(1792, 1792, 1792), dyn_hidden=(1792, 1792), rew_hidden=(1792, 1792))

    @property
    def codec(self) -> TwoHotCodec:
        return TwoHotCodec(self.num_bins, self.vmin, self.vmax)


class WorldModel:
    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.codec = cfg.codec
        common = dict(hidden_activation=cfg.hidden_activation, use_layer_norm=cfg.use_layer_norm,
                      simplex_dim=cfg.simplex_dim)
        lat_act = "simnorm" if cfg.latent_activation == "simnorm" else "none"
        za_dim = cfg.latent_dim + cfg.act_dim + cfg.task_dim
        self.encoder = Mlp(MlpSpec(cfg.obs_dim + cfg.task_dim, cfg.enc_hidden, cfg.latent_dim,
                                   output_activation=lat_act, **common), rng)
        self.dynamics = Mlp(MlpSpec(za_dim, cfg.dyn_hidden, cfg.latent_dim, output_activation=lat_act,
                                    **common), rng)
        self.reward = Mlp(MlpSpec(za_dim, cfg.rew_hidden, cfg.num_bins, zero_final=True, **common), rng)
        self.task_emb = Tensor(rng.uniform(-1.0, 1.0, size=(cfg.num_tasks, cfg.task_dim)), requires_grad=True)

    # -- parameters ----------------------------------------------------------------
    @property
    def params(self) -> list[Tensor]:
        return [*self.encoder.params, *self.dynamics.params, *self.reward.params, self.task_emb]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for name, mlp in (("encoder", self.encoder), ("dynamics", self.dynamics), ("reward", self.reward)):
            for i, p in enumerate(mlp.params):
                out[f"{name}.{i}"] = p
        out["task_emb"] = self.task_emb
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_params().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.named_params().items():
            p.data = np.array(arrays[k], dtype=p.data.dtype).reshape(p.shape)

    def digest(self) -> str:
        return params_digest(self.params)

    def clone(self) -> "WorldModel":
        return copy.deepcopy(self)

    # -- forward ---------------------------------------------------------------------
    def embed(self, task) -> Tensor:
        ids = np.asarray(task)
        if ids.dtype.kind not in "iu" or ids.size == 0 or ids.min() < 0 or ids.max() >= self.cfg.num_tasks:
            raise UnknownTaskError(f"task id(s) {task!r} outside [0, {self.cfg.num_tasks})")
        return self.task_emb[ids.astype(np.intp)]

    def encode(self, obs, task, e: Tensor | None = None) -> Tensor:
        """``z = E(s, e)`` for ``obs`` (B, n) and task id(s)."""
        obs = obs if isinstance(obs, Tensor) else Tensor(obs)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise dc.ShapeError("encode", obs.shape, (self.cfg.obs_dim,))
        e = self._task_rows(task, obs.shape[:-1]) if e is None else e
        return self.encoder(dc.concat([obs, e], axis=-1))

    def dynamics_step(self, z: Tensor, a, task, e: Tensor | None = None) -> Tensor:
        a = a if isinstance(a, Tensor) else Tensor(a)
        if z.shape[-1] != self.cfg.latent_dim or a.shape[-1] != self.cfg.act_dim or z.shape[:-1] != a.shape[:-1]:
            raise dc.ShapeError("dynamics_step", z.shape, a.shape)
        e = self._task_rows(task, z.shape[:-1]) if e is None else e
        return self.dynamics(dc.concat([z, a, e], axis=-1))

    def reward_logits(self, z: Tensor, a, task, e: Tensor | None = None) -> Tensor:
        a = a if isinstance(a, Tensor) else Tensor(a)
        if z.shape[-1] != self.cfg.latent_dim or a.shape[-1] != self.cfg.act_dim or z.shape[:-1] != a.shape[:-1]:
            raise dc.ShapeError("reward_logits", z.shape, a.shape)
        e = self._task_rows(task, z.shape[:-1]) if e is None else e
        return self.reward(dc.concat([z, a, e], axis=-1))

    def _task_rows(self, task, lead: tuple) -> Tensor:
        ids = np.asarray(task)
        if ids.ndim == 0:
            ids = np.full(lead, int(ids))
        elif ids.shape != lead:
            ids = np.broadcast_to(ids.reshape(ids.shape + (1,) * (len(lead) - ids.ndim)), lead)
        return self.embed(ids)


def params_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class frozen:
    """Context manager: the given parameters stop requiring gradients."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self._prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self._prev):
            p.requires_grad = flag
        return False


# ---------------------------------------------------------------------------
# loss

@dataclass
class WmLoss:
    total: Tensor
    consistency: Tensor
    reward: Tensor


def wm_loss(wm: WorldModel, batch: Batch, gamma: float = 0.99, reward_targets: np.ndarray | None = None) -> WmLoss:
    """Discounted latent-consistency + reward cross-entropy, averaged over batch and horizon."""
    B, H = batch.act.shape[:2]
    if batch.obs.shape[1] != H + 1 or batch.rew.shape != (B, H):
        raise ValueError(f"horizon mismatch: obs {batch.obs.shape}, act {batch.act.shape}, rew {batch.rew.shape}")
    cfg = wm.cfg
    e = wm.embed(batch.task)
    z = wm.encode(batch.obs[:, 0], batch.task, e=e)
    with dc.no_grad():
        e_rep = np.repeat(e.data[:, None], H, axis=1).reshape(B * H, -1)
        tgt = wm.encode(batch.obs[:, 1:].reshape(B * H, -1), None, e=Tensor(e_rep))
    tgt = dc.stop_gradient(tgt).data.reshape(B, H, cfg.latent_dim)
    if reward_targets is None:
        reward_targets = two_hot_encode(wm.codec, batch.rew, dtype=tgt.dtype)

    zs, cons = [], []
    for t in range(H):
        zs.append(z)
        z = wm.dynamics_step(z, batch.act[:, t], None, e=e)
        cons.append(dc.sum(dc.square(z - tgt[:, t]), axis=-1))
    weights = (gamma ** np.arange(H)).astype(tgt.dtype)

    z_all = dc.reshape(dc.stack(zs, axis=1), (B * H, cfg.latent_dim))
    e_all = dc.reshape(dc.stack([e] * H, axis=1), (B * H, -1))
    logits = wm.reward_logits(z_all, batch.act.reshape(B * H, -1), None, e=e_all)
    ce = dc.reshape(dc.cross_entropy_with_logits(logits, reward_targets.reshape(B * H, -1)), (B, H))
    cons_t = dc.stack(cons, axis=1)  # (B, H)

    w = weights / H
    consistency = dc.sum(dc.mul(cons_t, w)) / B
    reward = dc.sum(dc.mul(ce, w)) / B
    return WmLoss(consistency + reward, consistency, reward)


# ---------------------------------------------------------------------------
# training

@dataclass
class WmTrainConfig:
    horizon: int = 16
    gamma: float = 0.99
    batch_size: int = 128
    steps: int = 10_000
    lr: float = 3e-4
    grad_clip: float = 20.0
    log_every: int = 100


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, key):
        return np.array([r[key] for r in self.rows])

    def __len__(self):
        return len(self.rows)


def wm_train(wm: WorldModel, dataset, cfg: WmTrainConfig, rng: np.random.Generator,
             optimizer: Adam | None = None, callback: Callable | None = None) -> TrainLog:
    """Adam on ``wm_loss`` over windows sampled from ``dataset`` (anything with ``sample_windows``).

    Logs every step. A non-finite loss restores the last finite parameters and
    raises :class:`NumericalError`.
    """
    opt = optimizer or Adam(wm.params, lr=cfg.lr, clip=cfg.grad_clip)
    out = TrainLog()
    last_good = wm.state_arrays() if cfg.steps else None
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = dataset.sample_windows(rng, cfg.batch_size, cfg.horizon)
        loss = wm_loss(wm, batch, cfg.gamma)
        value = loss.total.item()
        if not np.isfinite(value):
            wm.load_arrays(last_good)
            raise NumericalError(f"world-model loss is {value} at step {step}; restored last finite parameters")
        loss.total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            last_good = wm.state_arrays()
        row = dict(step=step, wall_clock_s=time.perf_counter() - t0, loss=value,
                   consistency_loss=loss.consistency.item(), reward_loss=loss.reward.item())
        out.append(**row)
        if callback is not None:
            callback(row)
    return out


def wm_eval_loss(wm: WorldModel, dataset, horizon: int, gamma: float, rng: np.random.Generator,
                 batch_size: int = 256, batches: int = 4) -> dict:
    """Mean loss terms on freshly sampled windows, without recording a graph."""
    tot = cons = rew = 0.0
    with dc.no_grad():
        for _ in range(batches):
            loss = wm_loss(wm, dataset.sample_windows(rng, batch_size, horizon), gamma)
            tot += loss.total.item()
            cons += loss.consistency.item()
            rew += loss.reward.item()
    return dict(loss=tot / batches, consistency_loss=cons / batches, reward_loss=rew / batches)


def one_step_consistency(wm: WorldModel, batch: Batch) -> float:
    """Mean squared latent error of a single predicted step against the encoder target."""
    with dc.no_grad():
        z = wm.encode(batch.obs[:, 0], batch.task)
        z1 = wm.dynamics_step(z, batch.act[:, 0], batch.task)
        tgt = wm.encode(batch.obs[:, 1], batch.task)
        return float(np.mean(np.sum((z1.data - tgt.data) ** 2, axis=-1)))


# ---------------------------------------------------------------------------
# online fine-tuning

@dataclass
class FinetuneConfig:
    capacity: int = 1024
    iterations: int = 10
    envs: int = 8
    rollout_steps: int = 32
    updates_per_iter: int = 16
    horizon: int = 16
    batch_size: int = 64
    gamma: float = 0.99
    lr: float = 3e-4
    grad_clip: float = 20.0


def wm_finetune_online(wm: WorldModel, task, registry, act_fn: Callable[[np.ndarray], np.ndarray],
                       cfg: FinetuneConfig, rng: np.random.Generator,
                       replay: ReplayBuffer | None = None) -> tuple[ReplayBuffer, TrainLog]:
    """Alternate true-environment rollouts into a FIFO replay with ``wm_loss`` updates.

    ``act_fn`` maps padded observations (B, n) to normalised padded actions (B, m).
    """
    replay = replay or ReplayBuffer(cfg.capacity, registry.obs_dim, registry.act_dim)
    opt = Adam(wm.params, lr=cfg.lr, clip=cfg.grad_clip)
    out = TrainLog()
    state = Tensor(task.sample_init(rng, cfg.envs))
    t_in_ep = 0
    episode_base = 0
    for it in range(cfg.iterations):
        obs_l, act_l, rew_l, nxt_l = [], [], [], []
        with dc.no_grad():
            for _ in range(cfg.rollout_steps):
                obs = registry.pad_obs(task.task_id, task.observe(state).data)
                act = np.asarray(act_fn(obs), dtype=np.float32)
                native = Tensor(registry.unpad_action(task.task_id, act))
                rew = task.reward(state, native).data
                state = task.step(state, native)
                obs_l.append(obs)
                act_l.append(act)
                rew_l.append(rew)
                nxt_l.append(registry.pad_obs(task.task_id, task.observe(state).data))
                t_in_ep += 1
                if t_in_ep >= task.episode_length:
                    break
        seg = [np.stack(x, axis=1) for x in (obs_l, act_l, rew_l, nxt_l)]
        for b in range(cfg.envs):
            replay.add(seg[0][b], seg[1][b], seg[2][b], seg[3][b], task.task_id, episode_base + b)
        if t_in_ep >= task.episode_length:
            state = Tensor(task.sample_init(rng, cfg.envs))
            t_in_ep = 0
            episode_base += cfg.envs
        if replay.valid_starts(cfg.horizon).size == 0:
            continue
        for _ in range(cfg.updates_per_iter):
            loss = wm_loss(wm, replay.sample_windows(rng, cfg.batch_size, cfg.horizon), cfg.gamma)
            loss.total.backward()
            opt.step()
            out.append(iteration=it, loss=loss.total.item(), consistency_loss=loss.consistency.item(),
                       reward_loss=loss.reward.item())
    return replay, out


def config_dict(cfg) -> dict:
    return asdict(cfg)
