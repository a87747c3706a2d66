"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, python floats) and
shares no code with the package, so agreement is evidence rather than
tautology.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_reference(x, w, stride=1, padding=0, dilation=1):
    """Direct-summation cross-correlation on (B, C, H, W)."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, o, oh, ow), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[bi, ci, oy * stride + ky * dilation,
                                       ox * stride + kx * dilation]
                                    * w[oi, ci, ky, kx]
                                )
                    out[bi, oi, oy, ox] = acc
    return out


def depthwise_conv2d_reference(x, w, padding=0, dilation=1):
    """Channelwise cross-correlation, stride 1; w is (C, 1, kh, kw)."""
    b, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    oh = h + 2 * padding - dilation * (kh - 1)
    ow = wd + 2 * padding - dilation * (kw - 1)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, c, oh, ow), dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += (
                                xp[bi, ci, oy + ky * dilation, ox + kx * dilation]
                                * w[ci, 0, ky, kx]
                            )
                    out[bi, ci, oy, ox] = acc
    return out


def avg_pool2_reference(x):
    b, c, h, w = x.shape
    out = np.zeros((b, c, h // 2, w // 2), dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            for oy in range(h // 2):
                for ox in range(w // 2):
                    out[bi, ci, oy, ox] = (
                        x[bi, ci, 2 * oy, 2 * ox]
                        + x[bi, ci, 2 * oy + 1, 2 * ox]
                        + x[bi, ci, 2 * oy, 2 * ox + 1]
                        + x[bi, ci, 2 * oy + 1, 2 * ox + 1]
                    ) / 4.0
    return out


def linear_reference(x, w):
    b, nin = x.shape
    nout = w.shape[0]
    out = np.zeros((b, nout), dtype=np.float64)
    for bi in range(b):
        for oi in range(nout):
            acc = 0.0
            for i in range(nin):
                acc += w[oi, i] * x[bi, i]
            out[bi, oi] = acc
    return out


def step_fn(x: float) -> float:
    return 1.0 if x >= 0.0 else 0.0


def pcnn_scalar_trace(i_f_seq, i_l_seq, alpha_f, alpha_l, alpha_e, v_e,
                      arith="multiplicative"):
    """Hand-stepped coupled-unit recursion on python floats.

    Returns per-step lists (f, l, e, u, y) starting from the standard
    initial state (zeros, threshold v_e/alpha_e).
    """
    f = l = y = 0.0
    e = v_e / alpha_e
    fs, ls, es, us, ys = [], [], [], [], []
    for i_f, i_l in zip(i_f_seq, i_l_seq):
        f = alpha_f * f + i_f
        l = alpha_l * l + i_l
        e = alpha_e * e + v_e * y
        if arith == "multiplicative":
            u = f * (1.0 + l)
        else:
            u = f + l
        y = step_fn(u - e)
        fs.append(f); ls.append(l); es.append(e); us.append(u); ys.append(y)
    return fs, ls, es, us, ys


def nonlinking_scalar_trace(i_f_seq, alpha_f, alpha_e, v_e):
    """Hand-stepped uncoupled recursion: U equals the feeding integrator."""
    f = y = 0.0
    e = v_e / alpha_e
    fs, es, us, ys = [], [], [], []
    for i_f in i_f_seq:
        f = alpha_f * f + i_f
        e = alpha_e * e + v_e * y
        u = f
        y = step_fn(u - e)
        fs.append(f); es.append(e); us.append(u); ys.append(y)
    return fs, es, us, ys


def lif_scalar_trace(i_seq, decay, threshold):
    """Hand-stepped leaky integrate-and-fire with hard reset to zero."""
    v = 0.0
    vs, ys = [], []
    for i in i_seq:
        v_pre = decay * v + i
        y = step_fn(v_pre - threshold)
        v = 0.0 if y else v_pre
        vs.append(v); ys.append(y)
    return vs, ys


def adam_scalar_trace(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, p0=0.0):
    """Reference scalar Adam trajectory for a fixed gradient sequence."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


def central_diff_grads(loss_fn, arrays, h=1e-6):
    """Central finite differences of loss_fn w.r.t. every array element.

    arrays is a dict name -> ndarray (perturbed in place and restored).
    Returns dict name -> gradient array of matching shape.
    """
    grads = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads[name] = g.reshape(arr.shape)
    return grads
