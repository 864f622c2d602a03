"""Layers, activations, the two-hot reward codec and Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

log = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("relu", "mish", "simnorm")
OUTPUT_ACTIVATIONS = ("none", "simnorm", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 1
    hidden_activation: str = "mish"
    use_layer_norm: bool = True
    output_activation: str = "none"
    simplex_dim: int = 8
    zero_final: bool = False
    final_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.output_activation == "simnorm" and self.output_dim % self.simplex_dim:
            raise ValueError(
                f"simnorm output needs output_dim divisible by {self.simplex_dim}, got {self.output_dim}")
        if self.hidden_activation == "simnorm" and any(h % self.simplex_dim for h in self.hidden_dims):
            raise ValueError("simnorm hidden layers need widths divisible by the simplex dim")


def init_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=None) -> list[Tensor]:
    """Uniform fan-in initialisation; returns a flat parameter list.

    Layout per hidden layer: W, b[, ln_gain, ln_bias]; then W, b for the output layer.
    """
    dims = (spec.input_dim, *spec.hidden_dims, spec.output_dim)
    params = []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        last = i == n_layers - 1
        if last:
            if spec.zero_final:
                w, b = np.zeros_like(w), np.zeros_like(b)
            w, b = w * spec.final_scale, b * spec.final_scale
        params += [Tensor(w, True, dtype), Tensor(b, True, dtype)]
        if not last and spec.use_layer_norm:
            params += [Tensor(np.ones(fan_out), True, dtype), Tensor(np.zeros(fan_out), True, dtype)]
    return params


def _activate(x: Tensor, kind: str, simplex_dim: int) -> Tensor:
    if kind == "relu":
        return dc.relu(x)
    if kind == "mish":
        return dc.mish(x)
    if kind == "simnorm":
        return simnorm(x, simplex_dim)
    if kind == "tanh":
        return dc.tanh(x)
    return x


def mlp_forward(spec: MlpSpec, params: Sequence[Tensor], x: Tensor) -> Tensor:
    if x.shape[-1] != spec.input_dim:
        raise dc.ShapeError("mlp_forward", x.shape, (spec.input_dim,),
                            detail=f"expected last dim {spec.input_dim}")
    i = 0
    for _ in spec.hidden_dims:
        x = dc.linear(x, params[i], params[i + 1])
        i += 2
        if spec.use_layer_norm:
            x = dc.layer_norm(x, params[i], params[i + 1])
            i += 2
        x = _activate(x, spec.hidden_activation, spec.simplex_dim)
    x = dc.linear(x, params[i], params[i + 1])
    return _activate(x, spec.output_activation, spec.simplex_dim)


class Mlp:
    """An :class:`MlpSpec` bundled with its parameters."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, dtype=None):
        self.spec = spec
        self.params = init_mlp(spec, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x)


def simnorm(z: Tensor, simplex_dim: int = 8) -> Tensor:
    """Split the last axis into groups of ``simplex_dim`` and softmax each group."""
    d = z.shape[-1]
    if d % simplex_dim:
        raise dc.ShapeError("simnorm", z.shape, detail=f"last dim not divisible by {simplex_dim}")
    lead = z.shape[:-1]
    g = dc.softmax(dc.reshape(z, (*lead, d // simplex_dim, simplex_dim)))
    return dc.reshape(g, (*lead, d))


# ---------------------------------------------------------------------------
# symlog / two-hot

def symlog(x):
    if isinstance(x, Tensor):
        xd = x.data
        return dc._make(np.sign(xd) * np.log1p(np.abs(xd)), (x,),
                        lambda g: (g / (1.0 + np.abs(xd)),), "symlog")
    x = np.asarray(x, dtype=float) if not isinstance(x, np.ndarray) else x
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    if isinstance(x, Tensor):
        xd = x.data
        return dc._make(np.sign(xd) * np.expm1(np.abs(xd)), (x,),
                        lambda g: (g * np.exp(np.abs(xd)),), "symexp")
    x = np.asarray(x, dtype=float) if not isinstance(x, np.ndarray) else x
    return np.sign(x) * np.expm1(np.abs(x))


@dataclass(frozen=True)
class TwoHotCodec:
    num_bins: int = 101
    vmin: float = -10.0
    vmax: float = 10.0

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if not self.vmin < self.vmax:
            raise ValueError("vmin must be < vmax")

    @property
    def bin_size(self) -> float:
        return (self.vmax - self.vmin) / (self.num_bins - 1)

    @property
    def support(self) -> np.ndarray:
        return np.linspace(self.vmin, self.vmax, self.num_bins)


def two_hot_encode(codec: TwoHotCodec, r, dtype=np.float32) -> np.ndarray:
    """Encode rewards (any shape) into two-hot rows over ``codec.num_bins``.

    Targets are constants, so this works on plain arrays.
    """
    r = np.asarray(r, dtype=np.float64)
    x = np.clip(symlog(r), codec.vmin, codec.vmax)
    pos = (x - codec.vmin) / codec.bin_size
    idx = np.floor(pos).astype(np.int64)
    idx = np.clip(idx, 0, codec.num_bins - 1)
    offset = pos - idx
    # symlog(r) at vmax lands on the last bin with zero offset
    upper = np.minimum(idx + 1, codec.num_bins - 1)
    out = np.zeros((*r.shape, codec.num_bins))
    flat = out.reshape(-1, codec.num_bins)
    rows = np.arange(flat.shape[0])
    np.add.at(flat, (rows, idx.reshape(-1)), (1.0 - offset).reshape(-1))
    np.add.at(flat, (rows, upper.reshape(-1)), offset.reshape(-1))
    return out.astype(dtype)


def two_hot_decode_diff(codec: TwoHotCodec, logits: Tensor) -> Tensor:
    """Softmax expectation over the bin grid; a differentiable symlog-space pseudo-reward."""
    if logits.shape[-1] != codec.num_bins:
        raise dc.ShapeError("two_hot_decode_diff", logits.shape, (codec.num_bins,))
    vals = codec.support.astype(logits.dtype)
    return dc.sum(dc.mul(dc.softmax(logits), vals), axis=-1)


def two_hot_decode_eval(codec: TwoHotCodec, logits) -> Tensor | np.ndarray:
    """Reward in environment units (symexp of the differentiable decode)."""
    if isinstance(logits, Tensor):
        return symexp(two_hot_decode_diff(codec, logits))
    with dc.no_grad():
        return symexp(two_hot_decode_diff(codec, Tensor(logits)).data)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = None
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    skipped: int = 0


def adam_init(params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip: float | None = None) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, clip=clip,
                     m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params])


def global_norm(grads: Sequence[np.ndarray | None]) -> float:
    return math.sqrt(float(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads if g is not None)))


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> float:
    """One bias-corrected Adam update in place. Returns the pre-clip gradient norm.

    Non-finite gradients skip the update (counted in ``state.skipped``); the
    returned norm is then non-finite too. ``None`` grads count as zeros.
    """
    if len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params vs {len(state.m)} moment slots")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise dc.ShapeError("adam_step", p.shape, g.shape)
    norm = global_norm(grads)
    if not math.isfinite(norm):
        state.skipped += 1
        log.warning("adam_step: non-finite gradient norm, update skipped (%d so far)", state.skipped)
        return norm
    scale = 1.0
    if state.clip is not None and norm > state.clip:
        scale = state.clip / (norm + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if scale != 1.0:
            g = g * scale
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return norm


class Adam:
    """Convenience wrapper: reads ``.grad`` off the parameters and clears it."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, clip: float | None = None, **kw):
        self.params = list(params)
        self.state = adam_init(self.params, lr=lr, clip=clip, **kw)

    def step(self) -> float:
        norm = adam_step(self.state, self.params, [p.grad for p in self.params])
        self.zero_grad()
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
