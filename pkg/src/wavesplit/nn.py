"""Residual / FiLM residual blocks, linear layers and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractViolation, NumericError
from .tensor import Tensor

PRELU_INIT = 0.25


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


@dataclass
class LinearParams:
    weight: Tensor  # (in, out)
    bias: Tensor

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, bias_value: float = 0.0) -> "LinearParams":
        return cls(uniform_init(rng, (n_in, n_out), n_in), full((n_out,), bias_value))

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class ResidualBlockParams:
    conv_weight: Tensor  # (K, C, C)
    conv_bias: Tensor
    slope: Tensor
    gain: Tensor
    shift: Tensor
    dilation: int

    @property
    def channels(self) -> int:
        return self.conv_weight.shape[2]

    @classmethod
    def init(cls, rng, channels: int, dilation: int, kernel_size: int = 3) -> "ResidualBlockParams":
        return cls(
            conv_weight=uniform_init(rng, (kernel_size, channels, channels), kernel_size * channels),
            conv_bias=zeros((channels,)),
            slope=full((channels,), PRELU_INIT),
            gain=full((channels,), 1.0),
            shift=zeros((channels,)),
            dilation=dilation,
        )

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv.weight": self.conv_weight,
            f"{prefix}.conv.bias": self.conv_bias,
            f"{prefix}.prelu.slope": self.slope,
            f"{prefix}.norm.gain": self.gain,
            f"{prefix}.norm.shift": self.shift,
        }


@dataclass
class FiLMBlockParams(ResidualBlockParams):
    """Residual block plus per-layer projections of the concatenated centroids.

    ``scale`` is None in the additive-conditioning ablation (gain fixed to 1).
    """

    scale: LinearParams | None = None
    bias_proj: LinearParams | None = None

    @property
    def cond_dim(self) -> int:
        return self.bias_proj.weight.shape[0]

    @classmethod
    def init(cls, rng, channels: int, dilation: int, cond_dim: int = 0,
             kernel_size: int = 3, film: bool = True) -> "FiLMBlockParams":
        base = ResidualBlockParams.init(rng, channels, dilation, kernel_size)
        # scale bias starts at 1 so the block begins as an unmodulated residual block
        scale = LinearParams.init(rng, cond_dim, channels, bias_value=1.0) if film else None
        return cls(**vars(base), scale=scale, bias_proj=LinearParams.init(rng, cond_dim, channels))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = super().tensors(prefix)
        if self.scale is not None:
            out.update(self.scale.tensors(f"{prefix}.film_scale"))
        out.update(self.bias_proj.tensors(f"{prefix}.film_bias"))
        return out


def _check_channels(x: Tensor, params: ResidualBlockParams) -> None:
    if x.shape[-1] != params.channels:
        raise ContractViolation(f"block expects {params.channels} channels, got input {x.shape}")


def residual_block(x: Tensor, params: ResidualBlockParams) -> Tensor:
    """x + lnorm(prelu(dconv(x)))."""
    _check_channels(x, params)
    h = T.conv1d_dilated(x, params.conv_weight, params.conv_bias, params.dilation)
    return x + T.prelu_layer_norm(h, params.slope, params.gain, params.shift)


def film_projections(c: Tensor, params: FiLMBlockParams, x_ndim: int):
    """Return (a, b) shaped to broadcast over the time axis of ``x``; ``a`` is None when additive."""
    c = T.tensor(c)
    if c.shape[-1] != params.cond_dim:
        raise ContractViolation(
            f"centroid vector has length {c.shape[-1]}, block expects {params.cond_dim}")

    def over_time(v: Tensor) -> Tensor:
        # (B, C) -> (B, 1, C) so it broadcasts against (B, T, C)
        return v.reshape(v.shape[0], 1, v.shape[1]) if v.ndim == 2 and x_ndim == 3 else v

    a = None if params.scale is None else over_time(params.scale(c))
    return a, over_time(params.bias_proj(c))


def film_residual_block(x: Tensor, c: Tensor, params: FiLMBlockParams) -> Tensor:
    """x + lnorm(prelu(a * dconv(x) + b)) with a = lin(c), b = lin'(c).

    ``c`` is the concatenation of the N centroids, shape ``(N*d,)`` or
    ``(B, N*d)`` for a batch.
    """
    _check_channels(x, params)
    a, b = film_projections(c, params, x.ndim)
    h = T.conv1d_dilated(x, params.conv_weight, params.conv_bias, params.dilation)
    h = h + b if a is None else a * h + b
    return x + T.prelu_layer_norm(h, params.slope, params.gain, params.shift)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to a global L2 norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    A parameter whose gradient is None is left untouched (its moments are
    not decayed).  Raises NumericError, before touching anything, if any
    gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; Adam step rejected")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)
    return state
