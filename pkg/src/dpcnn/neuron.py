"""Discrete pulse-coupled neuron dynamics and the LIF baseline.

The pulse-coupled neuron keeps three leaky integrators per unit:

    F_t = alpha_F * F_{t-1} + i_F      (feeding, primary drive)
    L_t = alpha_L * L_{t-1} + i_L      (linking, neighbor drive)
    E_t = alpha_E * E_{t-1} + V_E * Y_{t-1}   (dynamic threshold)

The linking input modulates the feeding input multiplicatively,
U = F * (1 + L), so a unit with no primary drive cannot be activated
through coupling alone; an additive variant U = F + L is supported for
ablations. A spike fires when U - E >= 0 (ties fire), and instead of a
membrane reset the threshold jumps by V_E on the following step.

The dynamic threshold starts at V_E / alpha_E so that the all-zero initial
state does not fire spuriously; F, L, Y start at zero.

Spikes are exact 0/1 values. For gradient checking the hard step can be
swapped for its smooth companion (arctan-based), whose derivative is the
surrogate used in the backward pass: d/dx smooth(x) = 1 / (1 + (pi*x)^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Array, ShapeError


@dataclass(frozen=True)
class NeuronParams:
    """Leak factors and threshold gain of the pulse-coupled unit."""

    alpha_f: float = 0.5
    alpha_l: float = 0.5
    alpha_e: float = 0.7
    v_e: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha_f", "alpha_l", "alpha_e"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.v_e <= 0.0:
            raise ValueError(f"v_e must be positive, got {self.v_e}")


@dataclass(frozen=True)
class LifParams:
    """Decay and firing threshold of the leaky integrate-and-fire baseline."""

    decay: float = 0.5
    threshold: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.threshold <= 0.0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")


@dataclass
class PcnnLayerState:
    """Per-layer state at one time step: F, L, E integrators and spikes Y."""

    f: Array
    l: Array
    e: Array
    y: Array


def hard_spike(x: Array) -> Array:
    """Step function: 1 where x >= 0, else 0 (exact equality fires)."""
    return (x >= 0).astype(x.dtype)


def smooth_spike(x: Array) -> Array:
    """Differentiable stand-in for the step, arctan(pi*x)/pi + 1/2.

    Its exact derivative is surrogate_grad; used only by gradient checks.
    """
    return np.arctan(np.pi * x) / x.dtype.type(np.pi) + x.dtype.type(0.5)


def surrogate_grad(x: Array) -> Array:
    """Backward-pass derivative of the spike: 1 / (1 + (pi*x)^2)."""
    px = np.pi * x
    return 1.0 / (1.0 + px * px)


def init_state(shape: tuple[int, ...], params: NeuronParams, dtype=np.float32) -> PcnnLayerState:
    """Zero integrators and spikes; threshold starts at V_E / alpha_E."""
    z = np.zeros(shape, dtype=dtype)
    e0 = np.full(shape, params.v_e / params.alpha_e, dtype=dtype)
    return PcnnLayerState(f=z, l=z.copy(), e=e0, y=z.copy())


def _require_same_shape(state: PcnnLayerState, *currents: Array) -> None:
    for cur in currents:
        if cur.shape != state.f.shape:
            raise ShapeError(
                f"current shape {cur.shape} does not match state shape {state.f.shape}"
            )


def _pcnn_update(
    state: PcnnLayerState,
    i_f: Array,
    i_l: Array | None,
    params: NeuronParams,
    coupling_arith: str = "multiplicative",
    spike_fn=hard_spike,
) -> tuple[PcnnLayerState, Array]:
    """One step of the coupled unit; returns (new state, U - E pre-activation).

    i_l None means the nonlinking reduction: L stays frozen at zero and
    U = F exactly (no 1+L factor is applied).
    """
    dt = state.f.dtype.type
    f = dt(params.alpha_f) * state.f + i_f
    e = dt(params.alpha_e) * state.e + dt(params.v_e) * state.y
    if i_l is None:
        l = state.l
        u = f
    else:
        l = dt(params.alpha_l) * state.l + i_l
        if coupling_arith == "multiplicative":
            u = f * (1.0 + l)
        elif coupling_arith == "additive":
            u = f + l
        else:
            raise ValueError(f"unknown coupling arithmetic: {coupling_arith!r}")
    preact = u - e
    y = spike_fn(preact)
    return PcnnLayerState(f=f, l=l, e=e, y=y), preact


def pcnn_step(
    state: PcnnLayerState,
    i_f: Array,
    i_l: Array,
    params: NeuronParams,
    coupling_arith: str = "multiplicative",
    spike_fn=hard_spike,
) -> PcnnLayerState:
    """Advance a coupled layer one step given normalized synaptic currents."""
    _require_same_shape(state, i_f, i_l)
    new, _ = _pcnn_update(state, i_f, i_l, params, coupling_arith, spike_fn)
    return new


def nonlinking_step(
    state: PcnnLayerState,
    i_f: Array,
    params: NeuronParams,
    spike_fn=hard_spike,
) -> PcnnLayerState:
    """Advance an uncoupled layer: the linking path is removed and U = F."""
    _require_same_shape(state, i_f)
    new, _ = _pcnn_update(state, i_f, None, params, spike_fn=spike_fn)
    return new


def lif_step(
    v: Array,
    i: Array,
    params: LifParams,
    spike_fn=hard_spike,
) -> tuple[Array, Array]:
    """One leaky integrate-and-fire step with hard reset to zero.

    v_pre = decay * v + i; spikes where v_pre >= threshold; spiking units
    reset to 0, the rest keep v_pre. Returns (v_next, spikes).
    """
    if v.shape != i.shape:
        raise ShapeError(f"membrane shape {v.shape} does not match current {i.shape}")
    dt = v.dtype.type
    v_pre = dt(params.decay) * v + i
    y = spike_fn(v_pre - dt(params.threshold))
    v_next = v_pre * (1.0 - y)
    return v_next, y
