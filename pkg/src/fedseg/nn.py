"""Layer forward/backward passes, binary cross-entropy, and Adam.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward(cache, upstream)`` returns the input gradient (plus parameter
gradients where the layer has parameters). A cache may be consumed once.
All arithmetic stays in the dtype of the inputs, so the same code serves
float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, ShapeError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


class Cache(dict):
    """Saved forward state; ``take`` hands it to backward exactly once."""

    def __init__(self, layer, **saved):
        super().__init__(saved)
        self.layer = layer
        self.used = False


def _take(cache, layer):
    if cache is None:
        raise UsageError(f"{layer} backward called without a cache")
    if not isinstance(cache, Cache) or cache.layer != layer:
        raise UsageError(f"{layer} backward got a cache from another layer")
    if cache.used:
        raise UsageError(f"{layer} cache was already consumed by a backward pass")
    cache.used = True
    return cache


def _check_nchw(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be NCHW, got shape {x.shape}")


# --- convolution ---------------------------------------------------------


def _im2col(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _conv(x, weight, bias):
    n, _, h, w = x.shape
    o = weight.shape[0]
    cols = _im2col(x, weight.shape[2])
    out = cols @ weight.reshape(o, -1).T
    if bias is not None:
        out += bias
    return out.reshape(n, h, w, o).transpose(0, 3, 1, 2), cols


def conv2d_forward(x, weight, bias):
    """Stride-1 convolution with zero 'same' padding."""
    _check_nchw(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be [out, in, k, k], got {weight.shape}")
    if weight.shape[2] % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {weight.shape[2]}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out, cols = _conv(x, weight, bias)
    return np.ascontiguousarray(out), Cache("conv2d", cols=cols, weight=weight, x_shape=x.shape)


def conv2d_backward(cache, dout):
    c = _take(cache, "conv2d")
    w = c["weight"]
    o = w.shape[0]
    dy = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy.T @ c["cols"]).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    # full correlation with the flipped, channel-swapped kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv(dout, w_flip, None)
    return np.ascontiguousarray(dx), dw, db


# --- activations -----------------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), Cache("relu", mask=mask)


def relu_backward(cache, dout):
    return np.where(_take(cache, "relu")["mask"], dout, 0).astype(dout.dtype)


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, Cache("sigmoid", y=y)


def sigmoid_backward(cache, dout):
    y = _take(cache, "sigmoid")["y"]
    return dout * y * (1 - y)


# --- batch normalization -----------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train"):
    """Per-channel normalization over N, H, W.

    Returns ``(y, cache, (new_running_mean, new_running_var))``. The running
    statistics are returned rather than updated in place; in eval mode they
    come back unchanged.
    """
    _check_nchw(x)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"{name} shape {t.shape} does not match {c} channels")
    bshape = (1, c, 1, 1)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"batch-norm in train mode needs a batch of at least 2, got {x.shape[0]}")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=(0, 2, 3))
        xc = x - mu.reshape(bshape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        mom = x.dtype.type(BN_MOMENTUM)
        unbiased = var * x.dtype.type(m / max(m - 1, 1))
        new_stats = ((1 - mom) * running_mean + mom * mu,
                     (1 - mom) * running_var + mom * unbiased)
    elif mode == "eval":
        mu, var = running_mean, running_var
        xc = x - mu.reshape(bshape)
        new_stats = (running_mean, running_var)
    else:
        raise UsageError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1 / np.sqrt(var + x.dtype.type(BN_EPS))
    xhat = xc * inv_std.reshape(bshape)
    y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    cache = Cache("batchnorm", xhat=xhat, inv_std=inv_std, gamma=gamma, mode=mode)
    return y.astype(x.dtype), cache, new_stats


def batchnorm_backward(cache, dout):
    c = _take(cache, "batchnorm")
    xhat, inv_std, gamma = c["xhat"], c["inv_std"], c["gamma"]
    bshape = (1, -1, 1, 1)
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(bshape)
    if c["mode"] == "eval":
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
    dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
    return dx.astype(dout.dtype), dgamma, dbeta


# --- pooling, upsampling, concatenation -------------------------------------


def maxpool2_forward(x):
    """2x2 max-pool, stride 2; ties go to the first element in row-major order."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even H and W, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, Cache("maxpool2", idx=idx, x_shape=x.shape)


def maxpool2_backward(cache, dout):
    c = _take(cache, "maxpool2")
    n, ch, h, w = c["x_shape"]
    win = np.zeros((n, ch, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(win, c["idx"][..., None], dout[..., None], axis=-1)
    win = win.reshape(n, ch, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, ch, h, w)


def upsample2_forward(x):
    """Nearest-neighbour x2: every pixel becomes a 2x2 block."""
    _check_nchw(x)
    return x.repeat(2, axis=2).repeat(2, axis=3), Cache("upsample2")


def upsample2_backward(cache, dout):
    _take(cache, "upsample2")
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a, b):
    _check_nchw(a, "a")
    _check_nchw(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1), Cache("concat", split=a.shape[1])


def concat_backward(cache, dout):
    k = _take(cache, "concat")["split"]
    return dout[:, :k], dout[:, k:]


# --- loss ------------------------------------------------------------------


def bce_loss(pred, target):
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].

    Returns ``(loss, dloss/dpred)``. The gradient is zero where the clamp is
    active.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    lo = pred.dtype.type(BCE_CLAMP)
    hi = pred.dtype.type(1 - BCE_CLAMP)
    p = np.clip(pred, lo, hi)
    n = pred.size
    loss = -(target * np.log(p) + (1 - target) * np.log(1 - p)).mean()
    inside = (pred >= lo) & (pred <= hi)
    grad = np.where(inside, (p - target) / (p * (1 - p)), 0) / pred.dtype.type(n)
    return float(loss), grad.astype(pred.dtype)


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update.

    Only names present in ``grads`` are updated. Returns ``(new_params,
    new_state)``; the inputs are left untouched.
    """
    new = dict(params)
    st = state.copy()
    st.t += 1
    bc1 = 1 - st.beta1 ** st.t
    bc2 = 1 - st.beta2 ** st.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        dt = p.dtype.type
        m = st.m.get(name, np.zeros_like(p))
        v = st.v.get(name, np.zeros_like(p))
        m = dt(st.beta1) * m + dt(1 - st.beta1) * g
        v = dt(st.beta2) * v + dt(1 - st.beta2) * (g * g)
        st.m[name], st.v[name] = m, v
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        new[name] = (p - dt(st.lr) * mhat / (np.sqrt(vhat) + dt(st.eps))).astype(p.dtype)
    return new, st
