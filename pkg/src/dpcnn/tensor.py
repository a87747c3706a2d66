"""Dense tensor primitives with paired forward/backward maps.

The public operations take arrays of shape (batch, channel, height,
width); fully connected layers view values as (batch, features). Every
forward operation has an exact adjoint, so the training engine above this
module never needs autodiff. Convolution is cross-correlation (no kernel
flip) and preserves the input dtype: float32 for training runs, float64
for gradient checks.

Internally convolutions run on a channels-last layout: the padded input
is flattened to a (pixels, channels) matrix and each kernel tap becomes
one matrix product against a contiguous slice, accumulated tap by tap in
a fixed order. Row positions whose windows straddle the padded grid are
computed and then discarded, trading a few percent of extra arithmetic
for the elimination of unfolded-patch copies. The `*_cl` functions expose
that layout to the network engine; the (B, C, H, W) entry points wrap
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check4d(name: str, x: Array) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4, got shape {x.shape}")


@dataclass(frozen=True)
class ConvKernel:
    """A bank of convolution filters plus its geometry.

    weights has shape (out_channels, in_channels, kh, kw). Coupling kernels
    must have odd kh, kw so each neuron's auto-synapse sits at the center
    tap; feeding kernels are unconstrained.
    """

    weights: Array
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise ShapeError(
                f"kernel weights must be rank-4 (O, I, kh, kw), got {self.weights.shape}"
            )
        if self.stride < 1 or self.padding < 0 or self.dilation < 1:
            raise ShapeError(
                f"bad kernel geometry: stride={self.stride} "
                f"padding={self.padding} dilation={self.dilation}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def conv_output_hw(
    hw: tuple[int, int], kern_hw: tuple[int, int], stride: int, padding: int, dilation: int
) -> tuple[int, int]:
    kh, kw = kern_hw
    h = (hw[0] + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w = (hw[1] + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if h < 1 or w < 1:
        raise ShapeError(
            f"kernel {kern_hw} with stride={stride} padding={padding} "
            f"dilation={dilation} does not fit input spatial extent {hw}"
        )
    return h, w


def _pad_cl(x: Array, padding: int) -> Array:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _taps(w: Array) -> Array:
    """(O, C, kh, kw) weights as (kh*kw, C, O) per-tap channel maps."""
    o, c, kh, kw = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw, c, o)


def _tap_offsets(kh: int, kw: int, wp: int, dilation: int) -> list[int]:
    return [ky * dilation * wp + kx * dilation for ky in range(kh) for kx in range(kw)]


def conv2d_cl(x: Array, w: Array, stride: int, padding: int, dilation: int) -> Array:
    """Channels-last convolution: x (B, H, W, C) -> (B, OH, OW, O)."""
    b, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(
            f"conv input has {c} channels (shape {x.shape}) but kernel expects "
            f"{ci} (shape {w.shape})"
        )
    oh, ow = conv_output_hw((h, wd), (kh, kw), stride, padding, dilation)
    xp = _pad_cl(x, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    flat = xp.reshape(-1, c)
    n = flat.shape[0]
    obuf = np.empty((n, o), dtype=x.dtype)
    taps = _taps(w)
    offsets = _tap_offsets(kh, kw, wp, dilation)
    d0 = offsets[0]
    np.matmul(flat[d0:], taps[0], out=obuf[: n - d0])
    obuf[n - d0 :] = 0
    for t, d in enumerate(offsets[1:], start=1):
        obuf[: n - d] += flat[d:] @ taps[t]
    grid = obuf.reshape(b, hp, wp, o)
    out = grid[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return np.ascontiguousarray(out)


def _embed_grad_cl(
    grad: Array, b: int, hp: int, wp: int, o: int, oh: int, ow: int, stride: int
) -> Array:
    ggrid = np.zeros((b, hp, wp, o), dtype=grad.dtype)
    ggrid[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride] = grad
    return ggrid


def conv2d_cl_grad_w(
    grad: Array, x: Array, w_shape, stride: int, padding: int, dilation: int
) -> Array:
    """Weight adjoint of conv2d_cl."""
    b, h, wd, c = x.shape
    o, _, kh, kw = w_shape
    oh, ow = conv_output_hw((h, wd), (kh, kw), stride, padding, dilation)
    if grad.shape != (b, oh, ow, o):
        raise ShapeError(
            f"conv upstream grad shape {grad.shape} does not match forward output "
            f"{(b, oh, ow, o)}"
        )
    xp = _pad_cl(x, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    flat = xp.reshape(-1, c)
    n = flat.shape[0]
    ggrid = _embed_grad_cl(grad, b, hp, wp, o, oh, ow, stride).reshape(-1, o)
    gtaps = np.empty((kh * kw, c, o), dtype=grad.dtype)
    for t, d in enumerate(_tap_offsets(kh, kw, wp, dilation)):
        gtaps[t] = flat[d:].T @ ggrid[: n - d]
    return np.ascontiguousarray(gtaps.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))


def conv2d_cl_grad_x(
    grad: Array, x_shape, w: Array, stride: int, padding: int, dilation: int
) -> Array:
    """Input adjoint of conv2d_cl; needs only the input's shape."""
    b, h, wd, c = x_shape
    o, _, kh, kw = w.shape
    oh, ow = conv_output_hw((h, wd), (kh, kw), stride, padding, dilation)
    if grad.shape != (b, oh, ow, o):
        raise ShapeError(
            f"conv upstream grad shape {grad.shape} does not match forward output "
            f"{(b, oh, ow, o)}"
        )
    hp, wp = h + 2 * padding, wd + 2 * padding
    n = b * hp * wp
    ggrid = _embed_grad_cl(grad, b, hp, wp, o, oh, ow, stride).reshape(-1, o)
    taps = _taps(w)
    offsets = _tap_offsets(kh, kw, wp, dilation)
    gflat = np.empty((n, c), dtype=grad.dtype)
    d0 = offsets[0]
    np.matmul(ggrid[: n - d0], np.ascontiguousarray(taps[0].T), out=gflat[d0:])
    gflat[:d0] = 0
    for t, d in enumerate(offsets[1:], start=1):
        gflat[d:] += ggrid[: n - d] @ taps[t].T
    gxp = gflat.reshape(b, hp, wp, c)
    if padding:
        gxp = gxp[:, padding : h + padding, padding : wd + padding]
    return np.ascontiguousarray(gxp)


def conv2d_cl_backward(
    grad: Array,
    x: Array,
    w: Array,
    stride: int,
    padding: int,
    dilation: int,
    need_x: bool = True,
) -> tuple[Array | None, Array]:
    """Adjoints of conv2d_cl: (grad_x or None, grad_w)."""
    grad_w = conv2d_cl_grad_w(grad, x, w.shape, stride, padding, dilation)
    if not need_x:
        return None, grad_w
    return conv2d_cl_grad_x(grad, x.shape, w, stride, padding, dilation), grad_w


def depthwise_conv2d_cl(x: Array, w: Array, padding: int, dilation: int = 1) -> Array:
    """Channelwise (stride-1) convolution: w is (C, 1, kh, kw)."""
    b, h, wd, c = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise weights {w.shape} do not match input channels {c}")
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = conv_output_hw((h, wd), (kh, kw), 1, padding, dilation)
    xp = _pad_cl(x, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    flat = xp.reshape(-1, c)
    n = flat.shape[0]
    obuf = np.zeros((n, c), dtype=x.dtype)
    for t, d in enumerate(_tap_offsets(kh, kw, wp, dilation)):
        ky, kx = divmod(t, kw)
        obuf[: n - d] += flat[d:] * w[:, 0, ky, kx]
    grid = obuf.reshape(b, hp, wp, c)
    return np.ascontiguousarray(grid[:, :oh, :ow])


def depthwise_conv2d_cl_grad_w(
    grad: Array, x: Array, w_shape, padding: int, dilation: int = 1
) -> Array:
    """Weight adjoint of depthwise_conv2d_cl."""
    b, h, wd, c = x.shape
    kh, kw = w_shape[2], w_shape[3]
    oh, ow = conv_output_hw((h, wd), (kh, kw), 1, padding, dilation)
    xp = _pad_cl(x, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    flat = xp.reshape(-1, c)
    n = flat.shape[0]
    ggrid = _embed_grad_cl(grad, b, hp, wp, c, oh, ow, 1).reshape(-1, c)
    grad_w = np.zeros(w_shape, dtype=grad.dtype)
    for t, d in enumerate(_tap_offsets(kh, kw, wp, dilation)):
        ky, kx = divmod(t, kw)
        grad_w[:, 0, ky, kx] = np.einsum("nc,nc->c", flat[d:], ggrid[: n - d])
    return grad_w


def depthwise_conv2d_cl_grad_x(
    grad: Array, x_shape, w: Array, padding: int, dilation: int = 1
) -> Array:
    """Input adjoint of depthwise_conv2d_cl."""
    b, h, wd, c = x_shape
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = conv_output_hw((h, wd), (kh, kw), 1, padding, dilation)
    hp, wp = h + 2 * padding, wd + 2 * padding
    n = b * hp * wp
    ggrid = _embed_grad_cl(grad, b, hp, wp, c, oh, ow, 1).reshape(-1, c)
    gflat = np.zeros((n, c), dtype=grad.dtype)
    for t, d in enumerate(_tap_offsets(kh, kw, wp, dilation)):
        ky, kx = divmod(t, kw)
        gflat[d:] += ggrid[: n - d] * w[:, 0, ky, kx]
    gxp = gflat.reshape(b, hp, wp, c)
    if padding:
        gxp = gxp[:, padding : h + padding, padding : wd + padding]
    return np.ascontiguousarray(gxp)


def depthwise_conv2d_cl_backward(
    grad: Array, x: Array, w: Array, padding: int, dilation: int = 1
) -> tuple[Array, Array]:
    """Adjoints of depthwise_conv2d_cl: (grad_x, grad_w)."""
    if grad.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"depthwise upstream grad channels {grad.shape} do not match input "
            f"{x.shape}"
        )
    grad_w = depthwise_conv2d_cl_grad_w(grad, x, w.shape, padding, dilation)
    grad_x = depthwise_conv2d_cl_grad_x(grad, x.shape, w, padding, dilation)
    return grad_x, grad_w


def avg_pool2_cl(x: Array) -> Array:
    """Channels-last 2x2 mean pooling, stride 2."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 requires even spatial extents, got {x.shape}")
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avg_pool2_cl_backward(grad: Array, x_shape) -> Array:
    b, h, w, c = x_shape
    g = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2)
    g *= grad.dtype.type(0.25)
    return g


# ---------------------------------------------------------------------------
# (B, C, H, W) entry points

def _to_cl(x: Array) -> Array:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _from_cl(x: Array) -> Array:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d(x: Array, k: ConvKernel) -> Array:
    """Cross-correlate x (B, C, H, W) with the filter bank k.

    Output spatial extent is floor((H + 2p - d*(kh-1) - 1)/s) + 1; the
    value at each site is the window's cross-correlation sum.
    """
    _check4d("conv input", x)
    out = conv2d_cl(_to_cl(x), k.weights, k.stride, k.padding, k.dilation)
    return _from_cl(out)


def conv2d_backward(
    grad: Array, x: Array, k: ConvKernel, need_x: bool = True
) -> tuple[Array | None, Array]:
    """Adjoints of conv2d: gradients w.r.t. input and weights.

    grad has the forward output's shape. Returns (grad_x, grad_w);
    grad_x is None when need_x is False.
    """
    _check4d("conv grad", grad)
    gx, gw = conv2d_cl_backward(
        _to_cl(grad), _to_cl(x), k.weights, k.stride, k.padding, k.dilation, need_x
    )
    return (None if gx is None else _from_cl(gx)), gw


def depthwise_conv2d(x: Array, weights: Array, padding: int, dilation: int = 1) -> Array:
    """Channelwise (depthwise) stride-1 cross-correlation on (B, C, H, W).

    weights has shape (C, 1, kh, kw); output channel c sees only input
    channel c. Used for intra-channel coupling.
    """
    _check4d("depthwise input", x)
    return _from_cl(depthwise_conv2d_cl(_to_cl(x), weights, padding, dilation))


def depthwise_conv2d_backward(
    grad: Array, x: Array, weights: Array, padding: int, dilation: int = 1
) -> tuple[Array, Array]:
    """Adjoints of depthwise_conv2d: (grad_x, grad_w)."""
    gx, gw = depthwise_conv2d_cl_backward(
        _to_cl(grad), _to_cl(x), weights, padding, dilation
    )
    return _from_cl(gx), gw


def avg_pool2(x: Array) -> Array:
    """2x2 mean pooling with stride 2 on (B, C, H, W); extents must be even."""
    _check4d("pool input", x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 requires even spatial extents, got {x.shape}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad: Array, x_shape: tuple[int, int, int, int]) -> Array:
    """Distribute each upstream gradient equally over its 2x2 window."""
    b, c, h, w = x_shape
    if grad.shape != (b, c, h // 2, w // 2):
        raise ShapeError(
            f"pool upstream grad shape {grad.shape} does not match output "
            f"{(b, c, h // 2, w // 2)}"
        )
    g = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3)
    g *= grad.dtype.type(0.25)
    return g


def linear(x: Array, w: Array) -> Array:
    """y[b, o] = sum_i w[o, i] * x[b, i]; no bias term."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects rank-2 operands, got x {x.shape}, w {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear inner dimensions disagree: x {x.shape} vs w {w.shape}")
    return x @ w.T


def linear_backward(grad: Array, x: Array, w: Array) -> tuple[Array, Array]:
    """Adjoints of linear: (grad_x, grad_w)."""
    if grad.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(
            f"linear upstream grad shape {grad.shape} does not match output "
            f"{(x.shape[0], w.shape[0])}"
        )
    return grad @ w, grad.T @ x
