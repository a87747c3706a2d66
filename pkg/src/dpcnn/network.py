"""Architecture compilation and the T-step unrolled episode forward pass.

Architectures are written as compact strings ("32C3-P2-32C3-P2-128-10"):
NNC3 is a 3x3 conv layer with NN output channels, P2 a 2x2 average pool,
a bare integer a fully connected layer; the last integer is the leak-free
output accumulator whose per-step currents are the logits. Conv layers
carry spiking units (pulse-coupled by default, LIF for the baseline);
hidden fully connected layers are uncoupled pulse-coupled units with
time-dependent normalization; the output layer gets raw currents.

An episode presents the same input frame at every step (direct encoding),
the first conv layer acting as the encoder. Each coupled conv layer
computes its feeding current from the previous layer's current-step
spikes and its linking current from its own previous-step spikes, both
normalized per step. The forward pass runs layer-major (all T steps of a
layer before the next), which is equivalent to step-major because
same-step dependencies are strictly feedforward; this lets the feeding
convolutions batch all steps into one matrix product.

Internally activations are channels-last, (batch, height, width, channel);
the episode entry point accepts the canonical (batch, channel, height,
width) frames and transposes once. Recorded tape arrays are channels-last.

The EpisodeTape holds, per layer and step, the integrator states, spike
maps, normalized currents, pre-activations (U - E) and the saved
normalization contexts that the hand-derived backward pass consumes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .neuron import (
    LifParams,
    NeuronParams,
    PcnnLayerState,
    _pcnn_update,
    hard_spike,
    init_state,
    smooth_spike,
    surrogate_grad,
)
from .normalization import FEEDING, LINKING, TD, BnBank, BnContext, bn_backward, bn_eval
from .tensor import (
    Array,
    ShapeError,
    avg_pool2_cl,
    avg_pool2_cl_backward,
    conv2d_cl,
    conv2d_cl_grad_w,
    conv2d_cl_grad_x,
    conv_output_hw,
    depthwise_conv2d_cl,
    depthwise_conv2d_cl_grad_w,
    depthwise_conv2d_cl_grad_x,
    linear,
    linear_backward,
)

COUPLING_NONE, COUPLING_INTRA, COUPLING_INTER = "none", "intra", "inter"
COUPLING_MODES = (COUPLING_NONE, COUPLING_INTRA, COUPLING_INTER)
ARITH_MULT, ARITH_ADD = "multiplicative", "additive"
NEURON_PCNN, NEURON_LIF = "pcnn", "lif"

# coupling kernel geometry: name -> (size, padding, dilation); the padding
# keeps the spatial extent so a layer couples onto itself
COUPLING_KERNELS = {
    "1x1": (1, 0, 1),
    "3x3": (3, 1, 1),
    "5x5": (5, 2, 1),
    "3x3d2": (3, 2, 2),
}

NAMED_ARCHITECTURES = {
    "mnistnet": "32C3-P2-32C3-P2-128-10",
    # doubled conv channels relative to mnistnet
    "mnistnetwide": "64C3-P2-64C3-P2-128-10",
    "vgg9": "64C3-64C3-P2-128C3-128C3-P2-256C3-256C3-256C3-P2-1024-10",
}

KIND_CONV_PCNN = "conv_pcnn"
KIND_CONV_PCNN_NONLINKING = "conv_pcnn_nonlinking"
KIND_CONV_LIF = "conv_lif"
KIND_AVG_POOL = "avg_pool"
KIND_FC_PCNN_NONLINKING = "fc_pcnn_nonlinking"
KIND_FC_LIF = "fc_lif"
KIND_OUTPUT = "output_accumulator"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0
    coupling: str = COUPLING_NONE
    coupling_kernel: str = "3x3"
    coupling_arith: str = ARITH_MULT


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    steps: int
    neuron: NeuronParams = NeuronParams()
    lif: LifParams = LifParams()
    bn_mode: str = "rftd"  # rftd | td | rfd | none
    input_shape: tuple[int, int, int] = (1, 28, 28)  # (C, H, W)


class SpecError(ValueError):
    """Raised when an architecture description is malformed."""


def parse_architecture(
    text: str,
    coupling: str = COUPLING_INTER,
    coupling_kernel: str = "3x3",
    coupling_arith: str = ARITH_MULT,
    neuron_kind: str = NEURON_PCNN,
) -> tuple[LayerSpec, ...]:
    """Compile an architecture string into a layer list."""
    name = text.strip().lower()
    text = NAMED_ARCHITECTURES.get(name, text)
    if coupling not in COUPLING_MODES:
        raise SpecError(f"unknown coupling mode: {coupling!r}")
    if coupling != COUPLING_NONE and coupling_kernel not in COUPLING_KERNELS:
        raise SpecError(f"unknown coupling kernel: {coupling_kernel!r}")
    if neuron_kind not in (NEURON_PCNN, NEURON_LIF):
        raise SpecError(f"unknown neuron kind: {neuron_kind!r}")
    if neuron_kind == NEURON_LIF and coupling != COUPLING_NONE:
        raise SpecError("lif neurons do not support coupling; use --coupling none")

    tokens = [tok for tok in text.strip().split("-") if tok]
    if not tokens:
        raise SpecError(f"empty architecture string: {text!r}")
    layers: list[LayerSpec] = []
    for i, tok in enumerate(tokens):
        m = re.fullmatch(r"(\d+)C(\d+)", tok, flags=re.IGNORECASE)
        if m:
            if int(m.group(2)) != 3:
                raise SpecError(f"layer {i}: only 3x3 feeding kernels are supported ({tok})")
            ch = int(m.group(1))
            if neuron_kind == NEURON_LIF:
                layers.append(LayerSpec(KIND_CONV_LIF, ch))
            elif coupling == COUPLING_NONE:
                layers.append(LayerSpec(KIND_CONV_PCNN_NONLINKING, ch))
            else:
                layers.append(
                    LayerSpec(KIND_CONV_PCNN, ch, coupling, coupling_kernel, coupling_arith)
                )
            continue
        if re.fullmatch(r"P2", tok, flags=re.IGNORECASE):
            layers.append(LayerSpec(KIND_AVG_POOL))
            continue
        if tok.isdigit():
            ch = int(tok)
            kind = KIND_FC_LIF if neuron_kind == NEURON_LIF else KIND_FC_PCNN_NONLINKING
            layers.append(LayerSpec(kind, ch))
            continue
        raise SpecError(f"layer {i}: cannot parse token {tok!r} in {text!r}")
    if not layers or not layers[-1].kind.startswith("fc"):
        raise SpecError("architecture must end with an integer output layer")
    layers[-1] = replace(layers[-1], kind=KIND_OUTPUT)
    return tuple(layers)


def validate_spec(spec: NetworkSpec) -> None:
    """Reject malformed specs, naming the offending layer index."""
    if spec.steps < 1:
        raise SpecError(f"steps must be >= 1, got {spec.steps}")
    if spec.bn_mode not in ("rftd", "td", "rfd", "none"):
        raise SpecError(f"unknown bn mode: {spec.bn_mode!r}")
    n_out = sum(1 for l in spec.layers if l.kind == KIND_OUTPUT)
    if n_out != 1 or spec.layers[-1].kind != KIND_OUTPUT:
        raise SpecError("spec must contain exactly one output layer, last")
    c, h, w = spec.input_shape
    seen_fc = False
    for i, layer in enumerate(spec.layers):
        if layer.coupling != COUPLING_NONE and layer.kind != KIND_CONV_PCNN:
            raise SpecError(f"layer {i}: coupling is only valid on coupled conv layers")
        if layer.kind in (KIND_CONV_PCNN, KIND_CONV_PCNN_NONLINKING, KIND_CONV_LIF):
            if seen_fc:
                raise SpecError(f"layer {i}: conv layer after a fully connected layer")
            if layer.channels < 1:
                raise SpecError(f"layer {i}: conv layer needs channels >= 1")
            c = layer.channels
        elif layer.kind == KIND_AVG_POOL:
            if seen_fc:
                raise SpecError(f"layer {i}: pool layer after a fully connected layer")
            if h % 2 or w % 2:
                raise SpecError(
                    f"layer {i}: pooling needs even spatial extents, got {h}x{w}"
                )
            h, w = h // 2, w // 2
        else:
            if layer.channels < 1:
                raise SpecError(f"layer {i}: fully connected layer needs features >= 1")
            seen_fc = True


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Array:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class LayerTape:
    """Forward recordings of one layer (channels-last arrays, one per step)."""

    inputs: list[Array] = field(default_factory=list)
    f: list[Array] = field(default_factory=list)
    l: list[Array] = field(default_factory=list)
    e: list[Array] = field(default_factory=list)
    y: list[Array] = field(default_factory=list)
    i_f: list[Array] = field(default_factory=list)
    i_l: list[Array | None] = field(default_factory=list)
    preact: list[Array] = field(default_factory=list)
    ctx_f: list[BnContext | None] = field(default_factory=list)
    ctx_l: list[BnContext | None] = field(default_factory=list)
    input_shape: tuple | None = None


@dataclass
class EpisodeTape:
    """Full forward trajectory of one episode: all layers, all T steps."""

    layers: list[LayerTape]
    logits: Array | None = None
    phase: str = "train"
    steps: int = 0


def _accum(grads: dict, key: str, value: Array) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


class ConvSpikingLayer:
    """Conv feeding synapses into a sheet of spiking units.

    Covers the coupled pulse-coupled layer, its uncoupled reduction and the
    LIF baseline; the three differ only in which state recursions run.
    """

    def __init__(self, spec: LayerSpec, in_channels: int, net: "Network", rng):
        self.spec = spec
        self.net = net
        self.in_channels = in_channels
        self.out_channels = spec.channels
        dtype = net.dtype
        self.w = _uniform_init(
            rng, (spec.channels, in_channels, 3, 3), in_channels * 9, dtype
        )
        self.m: Array | None = None
        self.m_geom: tuple[int, int, int] | None = None  # (k, padding, dilation)
        if spec.coupling != COUPLING_NONE:
            k, pad, dil = COUPLING_KERNELS[spec.coupling_kernel]
            if spec.coupling == COUPLING_INTER:
                shape = (spec.channels, spec.channels, k, k)
                fan = spec.channels * k * k
            else:
                shape = (spec.channels, 1, k, k)
                fan = k * k
            self.m = _uniform_init(rng, shape, fan, dtype)
            self.m_geom = (k, pad, dil)
        paths = (FEEDING, LINKING) if spec.coupling != COUPLING_NONE else (FEEDING,)
        self.bank = (
            BnBank(net.spec.bn_mode, net.spec.steps, spec.channels, paths, dtype=dtype)
            if net.spec.bn_mode != "none"
            else None
        )

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (self.out_channels, h, w)

    def param_items(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.m is not None:
            yield f"{prefix}.m", self.m
        if self.bank is not None:
            for label, p in zip(self.bank.labels, self.bank.sets):
                yield f"{prefix}.bn.{label}.gamma", p.gamma
                yield f"{prefix}.bn.{label}.beta", p.beta

    def stat_items(self, prefix: str):
        if self.bank is not None:
            for label, p in zip(self.bank.labels, self.bank.sets):
                yield f"{prefix}.bn.{label}.running_mean", p.running_mean
                yield f"{prefix}.bn.{label}.running_var", p.running_var

    def _couple(self, y: Array) -> Array:
        k, pad, dil = self.m_geom
        if self.spec.coupling == COUPLING_INTER:
            return conv2d_cl(y, self.m, 1, pad, dil)
        return depthwise_conv2d_cl(y, self.m, pad, dil)

    def _couple_adjoint_x(self, g: Array, y_shape) -> Array:
        k, pad, dil = self.m_geom
        if self.spec.coupling == COUPLING_INTER:
            return conv2d_cl_grad_x(g, y_shape, self.m, 1, pad, dil)
        return depthwise_conv2d_cl_grad_x(g, y_shape, self.m, pad, dil)

    def _bn(self, raw, t, path, phase, tape, ctx_name):
        if self.bank is None:
            if tape is not None:
                getattr(tape, ctx_name).append(None)
            return raw
        if phase == "train":
            out, ctx, _ = self.bank.apply_train(raw, t, path)
        else:
            out, ctx = bn_eval(raw, self.bank.params_at(t, path)), None
        if tape is not None:
            getattr(tape, ctx_name).append(ctx)
        return out

    def forward(self, inputs: list[Array], phase: str, smooth: bool, mask, record: bool):
        t_steps = self.net.spec.steps
        b, h, w, _ = inputs[0].shape
        shape = (b, h, w, self.out_channels)
        spike_fn = smooth_spike if smooth else hard_spike
        tape = LayerTape(inputs=list(inputs), input_shape=inputs[0].shape) if record else None

        # feeding currents for every step in one matrix product; identical
        # step inputs (the encoder under direct encoding) convolve once
        if all(inp is inputs[0] for inp in inputs):
            c0 = conv2d_cl(inputs[0], self.w, 1, 1, 1)
            raw = [c0] * t_steps
        else:
            out = conv2d_cl(np.concatenate(inputs, axis=0), self.w, 1, 1, 1)
            raw = np.split(out, t_steps, axis=0)

        params = self.net.spec.neuron
        lif = self.net.spec.lif
        dt = self.net.dtype
        is_lif = self.spec.kind == KIND_CONV_LIF
        coupled = self.spec.coupling != COUPLING_NONE
        if is_lif:
            v = np.zeros(shape, dtype=dt)
        else:
            state = init_state(shape, params, dtype=dt)
        outputs = []
        for t in range(1, t_steps + 1):
            i_f = self._bn(raw[t - 1], t, FEEDING, phase, tape, "ctx_f")
            i_l = None
            if is_lif:
                v_pre = dt(lif.decay) * v + i_f
                preact = v_pre - dt(lif.threshold)
                y = spike_fn(preact)
                if mask is not None:
                    y = y * mask
                v = v_pre * (1.0 - y)
                state = PcnnLayerState(f=v, l=v, e=v, y=y)  # only y travels on
            else:
                if coupled:
                    c_l = self._couple(state.y)
                    i_l = self._bn(c_l, t, LINKING, phase, tape, "ctx_l")
                elif tape is not None:
                    tape.ctx_l.append(None)
                state, preact = _pcnn_update(
                    state, i_f, i_l, params, self.spec.coupling_arith, spike_fn
                )
                if mask is not None:
                    state.y = state.y * mask
            if tape is not None:
                tape.f.append(state.f)
                tape.l.append(state.l)
                tape.e.append(state.e)
                tape.y.append(state.y)
                tape.i_f.append(i_f)
                tape.i_l.append(i_l)
                tape.preact.append(preact)
            outputs.append(state.y)
        return outputs, tape

    def backward(self, tape: LayerTape, gy: list[Array], grads: dict, prefix: str,
                 need_input_grad: bool = True):
        t_steps = self.net.spec.steps
        params = self.net.spec.neuron
        lif = self.net.spec.lif
        dt = self.net.dtype
        is_lif = self.spec.kind == KIND_CONV_LIF
        coupled = self.spec.coupling != COUPLING_NONE
        mult = self.spec.coupling_arith == ARITH_MULT
        y_shape = tape.y[0].shape

        dcf: list[Array | None] = [None] * t_steps
        dcl: list[Array | None] = [None] * t_steps
        d_f = d_l = d_e = None
        carry = None  # contribution to dL/dY at the previous step
        g_v_next = None

        for t in range(t_steps, 0, -1):
            ti = t - 1
            g_y = gy[ti]
            if carry is not None:
                g_y = g_y + carry
            sp = surrogate_grad(tape.preact[ti])
            if is_lif:
                s = g_y * sp
                if g_v_next is not None:
                    v_pre = tape.preact[ti] + dt(lif.threshold)
                    s = s + g_v_next * ((1.0 - tape.y[ti]) - v_pre * sp)
                dcf[ti] = self._bn_back(s, tape.ctx_f[ti], t, FEEDING, grads, prefix)
                g_v_next = dt(lif.decay) * s
                continue
            s = g_y * sp
            if coupled and mult:
                delta_f = s * (1.0 + tape.l[ti])
                delta_l = s * tape.f[ti]
            elif coupled:
                delta_f = s
                delta_l = s
            else:
                delta_f = s
                delta_l = None
            if d_f is not None:
                delta_f = delta_f + dt(params.alpha_f) * d_f
                if coupled:
                    delta_l = delta_l + dt(params.alpha_l) * d_l
            delta_e = -s if d_e is None else dt(params.alpha_e) * d_e - s
            dcf[ti] = self._bn_back(delta_f, tape.ctx_f[ti], t, FEEDING, grads, prefix)
            carry = dt(params.v_e) * delta_e
            if coupled:
                dcl[ti] = self._bn_back(delta_l, tape.ctx_l[ti], t, LINKING, grads, prefix)
                carry = carry + self._couple_adjoint_x(dcl[ti], y_shape)
            d_f, d_l, d_e = delta_f, delta_l, delta_e

        gy_prev = self._feeding_grads(tape, dcf, grads, prefix, need_input_grad)
        if coupled:
            self._coupling_grads(tape, dcl, grads, prefix)
        return gy_prev

    def _bn_back(self, delta: Array, ctx, t: int, path: str, grads: dict, prefix: str):
        if self.bank is None:
            return delta
        gx, ggamma, gbeta = bn_backward(delta, ctx)
        label = self.bank.labels[self.bank.set_index(t, path)]
        _accum(grads, f"{prefix}.bn.{label}.gamma", ggamma)
        _accum(grads, f"{prefix}.bn.{label}.beta", gbeta)
        return gx

    def _feeding_grads(self, tape, dcf, grads, prefix, need_input_grad):
        t_steps = len(dcf)
        identical = all(inp is tape.inputs[0] for inp in tape.inputs)
        if identical:
            total = dcf[0].copy()
            for t in range(1, t_steps):
                total += dcf[t]
            gw = conv2d_cl_grad_w(total, tape.inputs[0], self.w.shape, 1, 1, 1)
            _accum(grads, f"{prefix}.w", gw)
            if not need_input_grad:
                return None
            gx = conv2d_cl_grad_x(total, tape.inputs[0].shape, self.w, 1, 1, 1)
            return [gx] * t_steps
        x_all = np.concatenate(tape.inputs, axis=0)
        g_all = np.concatenate(dcf, axis=0)
        gw = conv2d_cl_grad_w(g_all, x_all, self.w.shape, 1, 1, 1)
        _accum(grads, f"{prefix}.w", gw)
        if not need_input_grad:
            return None
        gx_all = conv2d_cl_grad_x(g_all, x_all.shape, self.w, 1, 1, 1)
        return list(np.split(gx_all, t_steps, axis=0))

    def _coupling_grads(self, tape, dcl, grads, prefix):
        # the linking input at step t is the layer's own spikes from step
        # t-1; step 1 sees the all-zero initial state and contributes nothing
        t_steps = len(dcl)
        k, pad, dil = self.m_geom
        if t_steps < 2:
            _accum(grads, f"{prefix}.m", np.zeros_like(self.m))
            return
        y_prev = np.concatenate(tape.y[: t_steps - 1], axis=0)
        g_all = np.concatenate(dcl[1:], axis=0)
        if self.spec.coupling == COUPLING_INTER:
            gm = conv2d_cl_grad_w(g_all, y_prev, self.m.shape, 1, pad, dil)
        else:
            gm = depthwise_conv2d_cl_grad_w(g_all, y_prev, self.m.shape, pad, dil)
        _accum(grads, f"{prefix}.m", gm)


class AvgPoolLayer:
    """2x2 mean pooling of spike maps; outputs lie in [0, 1]."""

    spec = LayerSpec(KIND_AVG_POOL)

    def __init__(self, net: "Network"):
        self.net = net

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def param_items(self, prefix):
        return ()

    def stat_items(self, prefix):
        return ()

    def forward(self, inputs, phase, smooth, mask, record):
        tape = LayerTape(input_shape=inputs[0].shape) if record else None
        return [avg_pool2_cl(x) for x in inputs], tape

    def backward(self, tape, gy, grads, prefix, need_input_grad=True):
        return [avg_pool2_cl_backward(g, tape.input_shape) for g in gy]


class FcSpikingLayer:
    """Fully connected synapses into uncoupled spiking units.

    Hidden classifier layer: the membrane potential equals the feeding
    integrator; normalization is time-dependent on the single feeding path.
    """

    def __init__(self, spec: LayerSpec, in_features: int, net: "Network", rng):
        self.spec = spec
        self.net = net
        self.in_features = in_features
        self.out_features = spec.channels
        self.w = _uniform_init(rng, (spec.channels, in_features), in_features, net.dtype)
        self.bank = (
            BnBank(TD, net.spec.steps, spec.channels, (FEEDING,), dtype=net.dtype)
            if net.spec.bn_mode != "none"
            else None
        )

    def out_shape(self, in_shape):
        return (self.out_features,)

    def param_items(self, prefix):
        yield f"{prefix}.w", self.w
        if self.bank is not None:
            for label, p in zip(self.bank.labels, self.bank.sets):
                yield f"{prefix}.bn.{label}.gamma", p.gamma
                yield f"{prefix}.bn.{label}.beta", p.beta

    def stat_items(self, prefix):
        if self.bank is not None:
            for label, p in zip(self.bank.labels, self.bank.sets):
                yield f"{prefix}.bn.{label}.running_mean", p.running_mean
                yield f"{prefix}.bn.{label}.running_var", p.running_var

    def _bn(self, raw, t, phase, tape):
        if self.bank is None:
            if tape is not None:
                tape.ctx_f.append(None)
            return raw
        if phase == "train":
            out, ctx, _ = self.bank.apply_train(raw, t, FEEDING)
        else:
            out, ctx = bn_eval(raw, self.bank.params_at(t, FEEDING)), None
        if tape is not None:
            tape.ctx_f.append(ctx)
        return out

    def forward(self, inputs, phase, smooth, mask, record):
        t_steps = self.net.spec.steps
        b = inputs[0].shape[0]
        x2d = [x.reshape(b, -1) for x in inputs]
        out = linear(np.concatenate(x2d, axis=0), self.w)
        raw = np.split(out, t_steps, axis=0)
        tape = (
            LayerTape(inputs=x2d, input_shape=inputs[0].shape) if record else None
        )
        spike_fn = smooth_spike if smooth else hard_spike
        params = self.net.spec.neuron
        lif = self.net.spec.lif
        dt = self.net.dtype
        is_lif = self.spec.kind == KIND_FC_LIF
        if is_lif:
            v = np.zeros((b, self.out_features), dtype=dt)
        else:
            state = init_state((b, self.out_features), params, dtype=dt)
        outputs = []
        for t in range(1, t_steps + 1):
            i_f = self._bn(raw[t - 1], t, phase, tape)
            if is_lif:
                v_pre = dt(lif.decay) * v + i_f
                preact = v_pre - dt(lif.threshold)
                y = spike_fn(preact)
                v = v_pre * (1.0 - y)
                state = PcnnLayerState(f=v, l=v, e=v, y=y)
            else:
                state, preact = _pcnn_update(state, i_f, None, params, spike_fn=spike_fn)
            if tape is not None:
                tape.f.append(state.f)
                tape.e.append(state.e)
                tape.y.append(state.y)
                tape.i_f.append(i_f)
                tape.preact.append(preact)
            outputs.append(state.y)
        return outputs, tape

    def backward(self, tape, gy, grads, prefix, need_input_grad=True):
        t_steps = self.net.spec.steps
        params = self.net.spec.neuron
        lif = self.net.spec.lif
        dt = self.net.dtype
        is_lif = self.spec.kind == KIND_FC_LIF
        dcf: list[Array | None] = [None] * t_steps
        d_f = d_e = None
        carry = None
        g_v_next = None
        for t in range(t_steps, 0, -1):
            ti = t - 1
            g_y = gy[ti]
            if carry is not None:
                g_y = g_y + carry
            sp = surrogate_grad(tape.preact[ti])
            if is_lif:
                s = g_y * sp
                if g_v_next is not None:
                    v_pre = tape.preact[ti] + dt(lif.threshold)
                    s = s + g_v_next * ((1.0 - tape.y[ti]) - v_pre * sp)
                g_v_next = dt(lif.decay) * s
                delta_f = s
            else:
                s = g_y * sp
                delta_f = s if d_f is None else s + dt(params.alpha_f) * d_f
                delta_e = -s if d_e is None else dt(params.alpha_e) * d_e - s
                carry = dt(params.v_e) * delta_e
                d_f, d_e = delta_f, delta_e
            if self.bank is not None:
                gx, ggamma, gbeta = bn_backward(delta_f, tape.ctx_f[ti])
                label = self.bank.labels[self.bank.set_index(t, FEEDING)]
                _accum(grads, f"{prefix}.bn.{label}.gamma", ggamma)
                _accum(grads, f"{prefix}.bn.{label}.beta", gbeta)
                dcf[ti] = gx
            else:
                dcf[ti] = delta_f
        g_all = np.concatenate(dcf, axis=0)
        x_all = np.concatenate(tape.inputs, axis=0)
        gx_all, gw = linear_backward(g_all, x_all, self.w)
        _accum(grads, f"{prefix}.w", gw)
        if not need_input_grad:
            return None
        in_shape = tape.input_shape
        return [g.reshape(in_shape) for g in np.split(gx_all, t_steps, axis=0)]


class OutputLayer:
    """Leak-free accumulator: per-step currents are the logits."""

    def __init__(self, spec: LayerSpec, in_features: int, net: "Network", rng):
        self.spec = spec
        self.net = net
        self.in_features = in_features
        self.out_features = spec.channels
        self.w = _uniform_init(rng, (spec.channels, in_features), in_features, net.dtype)

    def out_shape(self, in_shape):
        return (self.out_features,)

    def param_items(self, prefix):
        yield f"{prefix}.w", self.w

    def stat_items(self, prefix):
        return ()

    def forward(self, inputs, phase, smooth, mask, record):
        b = inputs[0].shape[0]
        x2d = [x.reshape(b, -1) for x in inputs]
        out = linear(np.concatenate(x2d, axis=0), self.w)
        logits = out.reshape(self.net.spec.steps, b, self.out_features)
        tape = LayerTape(inputs=x2d, input_shape=inputs[0].shape) if record else None
        return logits, tape

    def backward(self, tape, g_logits: Array, grads, prefix, need_input_grad=True):
        t_steps = self.net.spec.steps
        b = tape.inputs[0].shape[0]
        g_all = np.ascontiguousarray(g_logits).reshape(t_steps * b, self.out_features)
        x_all = np.concatenate(tape.inputs, axis=0)
        gx_all, gw = linear_backward(g_all, x_all, self.w)
        _accum(grads, f"{prefix}.w", gw)
        in_shape = tape.input_shape
        return [g.reshape(in_shape) for g in np.split(gx_all, t_steps, axis=0)]


class Network:
    """A compiled architecture: layer objects plus parameter registry."""

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        validate_spec(spec)
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.layers: list = []
        shape = spec.input_shape
        for layer_spec in spec.layers:
            if layer_spec.kind in (KIND_CONV_PCNN, KIND_CONV_PCNN_NONLINKING, KIND_CONV_LIF):
                layer = ConvSpikingLayer(layer_spec, shape[0], self, rng)
            elif layer_spec.kind == KIND_AVG_POOL:
                if shape[1] % 2 or shape[2] % 2:
                    raise SpecError(f"pool input extents must be even, got {shape}")
                layer = AvgPoolLayer(self)
            elif layer_spec.kind in (KIND_FC_PCNN_NONLINKING, KIND_FC_LIF):
                layer = FcSpikingLayer(layer_spec, int(np.prod(shape)), self, rng)
            elif layer_spec.kind == KIND_OUTPUT:
                layer = OutputLayer(layer_spec, int(np.prod(shape)), self, rng)
            else:
                raise SpecError(f"unknown layer kind {layer_spec.kind!r}")
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.output_shape = shape

    def parameters(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.param_items(f"layers.{i}"):
                out[name] = arr
        return out

    def state_arrays(self) -> dict[str, Array]:
        """Parameters plus normalization running statistics (checkpoint set)."""
        out = self.parameters()
        for i, layer in enumerate(self.layers):
            for name, arr in layer.stat_items(f"layers.{i}"):
                out[name] = arr
        return out

    def parameter_count(self) -> int:
        return sum(int(a.size) for a in self.parameters().values())


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """Deterministically initialize a network from its spec.

    Feeding and coupling weights draw from uniform(-sqrt(1/fan_in),
    +sqrt(1/fan_in)) in layer order; normalization scales start at 1,
    shifts at 0. The same seed always yields bitwise-identical weights.
    """
    return Network(spec, seed, dtype)


def forward_episode(
    net: Network,
    x: Array,
    phase: str = "train",
    smooth: bool = False,
    silencing_rate: float = 0.0,
    silencing_rng: np.random.Generator | None = None,
    record: bool = True,
) -> tuple[EpisodeTape | None, Array]:
    """Run one T-step episode on a minibatch of (B, C, H, W) frames.

    The same frame is presented at every step. Returns the recorded tape
    (None when record is False) and per-step logits of shape
    (T, batch, classes). Silencing (an eval-phase fault model) draws one
    keep/drop mask per sample and conv layer, held fixed across the
    episode's steps, and zeroes the masked units' spikes at the source.
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"unknown phase: {phase!r}")
    if phase == "train" and net.frozen:
        raise ShapeError("network is frozen (loaded for evaluation); train phase rejected")
    c, h, w = net.spec.input_shape
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ShapeError(
            f"input shape {x.shape} does not match network input {(c, h, w)}"
        )
    if phase == "train" and not record:
        raise ValueError("train phase requires tape recording")
    x_cl = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=net.dtype)
    t_steps = net.spec.steps
    values: list[Array] = [x_cl] * t_steps
    tape = EpisodeTape(layers=[], phase=phase, steps=t_steps) if record else None
    logits = None
    cur_shape = (c, h, w)
    for layer in net.layers:
        mask = None
        if silencing_rate > 0.0 and isinstance(layer, ConvSpikingLayer):
            if silencing_rng is None:
                raise ValueError("silencing requires a seeded random generator")
            oc, oh, ow = layer.out_shape(cur_shape)
            keep = silencing_rng.random((x.shape[0], oh, ow, oc)) >= silencing_rate
            mask = keep.astype(net.dtype)
        if isinstance(layer, OutputLayer):
            logits, layer_tape = layer.forward(values, phase, smooth, mask, record)
        else:
            values, layer_tape = layer.forward(values, phase, smooth, mask, record)
        cur_shape = layer.out_shape(cur_shape)
        if record:
            tape.layers.append(layer_tape)
    if record:
        tape.logits = logits
    return tape, logits


def predict(logits: Array) -> Array:
    """Class decision: argmax of the summed per-step logits, low index wins ties."""
    if logits.ndim != 3 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be (T, B, classes) with T >= 1, got {logits.shape}")
    return np.argmax(logits.sum(axis=0), axis=1)
