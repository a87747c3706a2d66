"""Batch normalization with per-step, per-input-path parameter banks.

A spiking conv layer normalizes two raw synaptic currents per time step
(the feeding current and, when coupled, the linking current). The bank
decides how learnable parameters and running statistics are shared:

    rftd  distinct parameters per (time step, path)  -> 2T sets per layer
    td    one set per time step, shared across paths ->  T sets
    rfd   one set per path, shared across time steps ->  2 sets

Inputs carry the channel in the trailing axis (the engine's activation
layout): conv currents arrive as (B, H, W, C), fully connected currents
as (B, C). Statistics reduce over every leading axis.

Train phase normalizes with the current minibatch's per-channel mean and
biased variance (divisor |B|); running statistics are folded in with
running <- (1 - momentum) * running + momentum * batch. Eval phase uses
running statistics only, making the output a fixed affine map of its
input. The backward pass is the exact adjoint of the train-phase forward,
including the dependence of the batch statistics on the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import Array, ShapeError

RFTD, TD, RFD = "rftd", "td", "rfd"
BN_MODES = (RFTD, TD, RFD)

FEEDING, LINKING = "feeding", "linking"

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass
class BnParams:
    """Per-channel scale/shift plus running statistics for eval."""

    gamma: Array
    beta: Array
    running_mean: Array
    running_var: Array
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    @classmethod
    def create(
        cls,
        channels: int,
        eps: float = DEFAULT_EPS,
        momentum: float = DEFAULT_MOMENTUM,
        dtype=np.float32,
    ) -> "BnParams":
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


class BnContext(NamedTuple):
    """Forward activations saved for the train-phase adjoint."""

    xhat: Array
    inv_std: Array
    gamma: Array


def _check_channels(x: Array, p: BnParams) -> None:
    if x.ndim < 2:
        raise ShapeError(f"bn input must have a batch axis, got shape {x.shape}")
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(
            f"bn input has {x.shape[-1]} channels (trailing axis of {x.shape}) but "
            f"parameters cover {p.gamma.shape[0]}"
        )


def _lead_axes(x: Array) -> tuple[int, ...]:
    return tuple(range(x.ndim - 1))


def bn_train(x: Array, p: BnParams) -> tuple[Array, BnContext]:
    """Normalize with minibatch statistics; updates running stats in place."""
    _check_channels(x, p)
    if x.shape[0] < 2:
        raise ShapeError(
            f"train-phase normalization needs batch size >= 2, got {x.shape[0]}"
        )
    axes = _lead_axes(x)
    mean = x.mean(axis=axes)
    centered = x - mean
    var = np.mean(centered * centered, axis=axes)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = centered * inv_std
    out = p.gamma * xhat + p.beta
    m = p.running_mean.dtype.type(p.momentum)
    p.running_mean *= 1.0 - m
    p.running_mean += m * mean.astype(p.running_mean.dtype, copy=False)
    p.running_var *= 1.0 - m
    p.running_var += m * var.astype(p.running_var.dtype, copy=False)
    return out, BnContext(xhat=xhat, inv_std=inv_std, gamma=p.gamma)


def bn_eval(x: Array, p: BnParams) -> Array:
    """Normalize with running statistics; a pure affine map of x."""
    _check_channels(x, p)
    inv_std = 1.0 / np.sqrt(p.running_var + x.dtype.type(p.eps))
    scale = (p.gamma * inv_std).astype(x.dtype, copy=False)
    shift = (p.beta - p.running_mean * p.gamma * inv_std).astype(x.dtype, copy=False)
    return x * scale + shift


def bn_apply(x: Array, p: BnParams, phase: str) -> Array:
    """Phase-dispatching wrapper around bn_train/bn_eval."""
    if phase == "train":
        out, _ = bn_train(x, p)
        return out
    if phase == "eval":
        return bn_eval(x, p)
    raise ValueError(f"unknown phase: {phase!r}")


def bn_backward(grad: Array, ctx: BnContext) -> tuple[Array, Array, Array]:
    """Exact adjoint of the train-phase forward.

    Returns (grad_x, grad_gamma, grad_beta). grad_x folds in the dependence
    of the batch mean and variance on x, so per channel the sum of grad_x
    vanishes along the mean direction.
    """
    if grad.shape != ctx.xhat.shape:
        raise ShapeError(
            f"bn upstream grad shape {grad.shape} does not match saved forward "
            f"{ctx.xhat.shape}"
        )
    axes = _lead_axes(grad)
    n = int(np.prod([grad.shape[a] for a in axes]))
    grad_beta = grad.sum(axis=axes)
    grad_gamma = np.sum(grad * ctx.xhat, axis=axes)
    coeff = (ctx.gamma * ctx.inv_std).astype(grad.dtype, copy=False)
    grad_x = coeff * (
        grad
        - grad_beta.astype(grad.dtype, copy=False) / n
        - ctx.xhat * (grad_gamma.astype(grad.dtype, copy=False) / n)
    )
    return grad_x, grad_gamma, grad_beta


@dataclass
class BnBank:
    """Normalization parameters for one layer, keyed by (t, path).

    mode selects the sharing rule; paths lists the input paths the layer
    actually normalizes (("feeding",) for uncoupled layers). Set labels are
    stable and used for parameter naming in checkpoints and gradients.
    """

    mode: str
    steps: int
    channels: int
    paths: tuple[str, ...] = (FEEDING,)
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    dtype: type = np.float32
    labels: list[str] = field(default_factory=list)
    sets: list[BnParams] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in BN_MODES:
            raise ValueError(f"unknown bn mode: {self.mode!r}")
        for path in self.paths:
            if path not in (FEEDING, LINKING):
                raise ValueError(f"unknown input path: {path!r}")
        self._index: dict[tuple, int] = {}
        for t in range(1, self.steps + 1):
            for path in self.paths:
                key = self._key(t, path)
                if key not in self._index:
                    self._index[key] = len(self.sets)
                    self.labels.append("_".join(str(k) for k in key))
                    self.sets.append(
                        BnParams.create(self.channels, self.eps, self.momentum, self.dtype)
                    )

    def _key(self, t: int, path: str) -> tuple:
        if self.mode == RFTD:
            return ("t%d" % t, path)
        if self.mode == TD:
            return ("t%d" % t,)
        return (path,)

    def set_index(self, t: int, path: str) -> int:
        if not 1 <= t <= self.steps:
            raise ShapeError(f"time step {t} outside [1, {self.steps}]")
        if path not in self.paths:
            raise ShapeError(f"path {path!r} not normalized by this bank ({self.paths})")
        return self._index[self._key(t, path)]

    def params_at(self, t: int, path: str) -> BnParams:
        return self.sets[self.set_index(t, path)]

    def apply(self, x: Array, t: int, path: str, phase: str) -> Array:
        """Route to the parameter set selected by the sharing rule."""
        return bn_apply(x, self.params_at(t, path), phase)

    def apply_train(self, x: Array, t: int, path: str) -> tuple[Array, BnContext, int]:
        """Train-phase apply returning the saved context and set index."""
        idx = self.set_index(t, path)
        out, ctx = bn_train(x, self.sets[idx])
        return out, ctx, idx
