"""Differentiable primitives on NCHW arrays.

Every layer is a small object that knows its parameter names; forward returns
(output, cache) and backward consumes the cache, accumulates parameter
gradients into a dict and returns the input gradient. Layers hold no data, so
one network definition can run several forwards concurrently.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Context:
    """Per-call state: train/eval flag and the batch-norm running buffers."""

    def __init__(self, train: bool, buffers: dict | None = None, update_stats: bool = True):
        self.train = train
        self.buffers = buffers if buffers is not None else {}
        self.update_stats = update_stats


def _accumulate(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


class Layer:
    def param_shapes(self) -> dict:
        return {}

    def buffer_init(self) -> dict:
        return {}

    def init(self, rng, params, dtype):
        for name, shape in self.param_shapes().items():
            params[name] = np.zeros(shape, dtype=dtype)

    def children(self):
        return []

    def walk(self):
        yield self
        for child in self.children():
            yield from child.walk()


def _patches(x, k, stride, pad):
    """im2col with (kh, kw, C) patch order; channel-last rows copy fastest."""
    B, C, H, W = x.shape
    xh = x.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if k == 1:
        win = xh[:, ::stride, ::stride][:, :Ho, :Wo]
        return win.reshape(B * Ho * Wo, C), Ho, Wo
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C), Ho, Wo


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation; returns (y, cols) where cols is the patch matrix."""
    B, C = x.shape[:2]
    O, Cw, k, _ = w.shape
    if C != Cw:
        raise ShapeMismatch(f"conv expects {Cw} input channels, got {C}")
    cols, Ho, Wo = _patches(x, k, stride, pad)
    y = cols @ w.transpose(0, 2, 3, 1).reshape(O, -1).T
    if not np.isscalar(b):
        y += b
    return y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2), cols


def conv2d_backward(dy, cols, x_shape, w, stride=1, pad=0):
    B, C, H, W = x_shape
    O, _, k, _ = w.shape
    _, _, Ho, Wo = dy.shape
    dmat = dy.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (dmat.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
    db = dmat.sum(axis=0)
    if stride == 1 and 2 * pad == k - 1:
        # same-padded stride-1 conv: input gradient is a full correlation with the
        # spatially flipped, channel-swapped kernel
        flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv2d(dy, flipped, 0, 1, k - 1 - pad)
        return dx, dw, db
    dcols = (dmat @ w.transpose(0, 2, 3, 1).reshape(O, -1)).reshape(B, Ho, Wo, k, k, C)
    dx = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad]
    return dx.transpose(0, 3, 1, 2), dw, db


class Conv(Layer):
    """Same-padded convolution; ``bias=False`` for convs feeding a batch norm."""

    def __init__(self, name, cin, cout, k=3, stride=1, bias=True):
        self.name, self.cin, self.cout, self.k, self.stride = name, cin, cout, k, stride
        self.pad = k // 2
        self.bias = bias

    def param_shapes(self):
        shapes = {f"{self.name}.w": (self.cout, self.cin, self.k, self.k)}
        if self.bias:
            shapes[f"{self.name}.b"] = (self.cout,)
        return shapes

    def init(self, rng, params, dtype):
        std = np.sqrt(2.0 / (self.cin * self.k * self.k))
        params[f"{self.name}.w"] = (rng.standard_normal(
            (self.cout, self.cin, self.k, self.k)) * std).astype(dtype)
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.cout, dtype=dtype)

    def forward(self, P, x, ctx):
        w = P[f"{self.name}.w"]
        b = P[f"{self.name}.b"] if self.bias else 0
        y, cols = conv2d(x, w, b, self.stride, self.pad)
        return y, (cols, x.shape)

    def backward(self, P, G, cache, dy):
        cols, shape = cache
        dx, dw, db = conv2d_backward(dy, cols, shape, P[f"{self.name}.w"], self.stride, self.pad)
        _accumulate(G, f"{self.name}.w", dw)
        if self.bias:
            _accumulate(G, f"{self.name}.b", db)
        return dx


class ConvTranspose(Layer):
    """Transposed convolution with kernel size equal to stride (non-overlapping)."""

    def __init__(self, name, cin, cout, factor):
        self.name, self.cin, self.cout, self.f = name, cin, cout, factor

    def param_shapes(self):
        f = self.f
        return {f"{self.name}.w": (self.cin, self.cout, f, f), f"{self.name}.b": (self.cout,)}

    def init(self, rng, params, dtype):
        std = np.sqrt(2.0 / self.cin)
        params[f"{self.name}.w"] = (rng.standard_normal(
            (self.cin, self.cout, self.f, self.f)) * std).astype(dtype)
        params[f"{self.name}.b"] = np.zeros(self.cout, dtype=dtype)

    def forward(self, P, x, ctx):
        B, C, H, W = x.shape
        if C != self.cin:
            raise ShapeMismatch(f"{self.name} expects {self.cin} channels, got {C}")
        f, O = self.f, self.cout
        xm = x.transpose(0, 2, 3, 1).reshape(-1, C)
        y = (xm @ P[f"{self.name}.w"].reshape(C, -1)).reshape(B, H, W, O, f, f)
        y = y.transpose(0, 3, 1, 4, 2, 5).reshape(B, O, H * f, W * f)
        y += P[f"{self.name}.b"][None, :, None, None]
        return y, (xm, x.shape)

    def backward(self, P, G, cache, dy):
        xm, (B, C, H, W) = cache
        f, O = self.f, self.cout
        dm = dy.reshape(B, O, H, f, W, f).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, -1)
        w = P[f"{self.name}.w"]
        _accumulate(G, f"{self.name}.w", (xm.T @ dm).reshape(w.shape))
        _accumulate(G, f"{self.name}.b", dy.sum(axis=(0, 2, 3)))
        return (dm @ w.reshape(C, -1).T).reshape(B, H, W, C).transpose(0, 3, 1, 2)


class BatchNorm(Layer):
    def __init__(self, name, channels):
        self.name, self.c = name, channels

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.c,), f"{self.name}.beta": (self.c,)}

    def buffer_init(self):
        return {f"{self.name}.running_mean": np.zeros(self.c),
                f"{self.name}.running_var": np.ones(self.c)}

    def init(self, rng, params, dtype):
        params[f"{self.name}.gamma"] = np.ones(self.c, dtype=dtype)
        params[f"{self.name}.beta"] = np.zeros(self.c, dtype=dtype)

    def forward(self, P, x, ctx):
        gamma = P[f"{self.name}.gamma"][None, :, None, None]
        beta = P[f"{self.name}.beta"][None, :, None, None]
        rm_key, rv_key = f"{self.name}.running_mean", f"{self.name}.running_var"
        if ctx.train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if ctx.update_stats and rm_key in ctx.buffers:
                count = x.size // x.shape[1]
                unbiased = var * count / max(count - 1, 1)
                ctx.buffers[rm_key] = (1 - BN_MOMENTUM) * ctx.buffers[rm_key] + BN_MOMENTUM * mean
                ctx.buffers[rv_key] = (1 - BN_MOMENTUM) * ctx.buffers[rv_key] + BN_MOMENTUM * unbiased
        else:
            mean = ctx.buffers[rm_key].astype(x.dtype)
            var = ctx.buffers[rv_key].astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * xhat + beta, (xhat, inv_std, ctx.train)

    def backward(self, P, G, cache, dy):
        xhat, inv_std, train = cache
        gamma = P[f"{self.name}.gamma"]
        _accumulate(G, f"{self.name}.gamma", (dy * xhat).sum(axis=(0, 2, 3)))
        _accumulate(G, f"{self.name}.beta", dy.sum(axis=(0, 2, 3)))
        dxhat = dy * gamma[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not train:
            return dxhat * scale
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return scale * (dxhat - mean_d - xhat * mean_dx)


class ReLU(Layer):
    def forward(self, P, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, P, G, cache, dy):
        return dy * cache


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, P, x, ctx):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(P, x, ctx)
            caches.append(c)
        return x, caches

    def backward(self, P, G, cache, dy):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dy = layer.backward(P, G, c, dy)
        return dy


def softmax_cross_entropy(logits, targets, class_weights=None):
    """Class-weighted mean cross-entropy over pixels and its logit gradient.

    The mean is normalised by the summed weights of the target pixels.
    """
    B, K, H, W = logits.shape
    if targets.shape != (B, H, W):
        raise ShapeMismatch(f"targets {targets.shape} do not match logits {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    prob = exp / exp.sum(axis=1, keepdims=True)
    t = targets.astype(np.intp)
    weights = np.ones(K, dtype=logits.dtype) if class_weights is None else \
        np.asarray(class_weights, dtype=logits.dtype)
    pix_w = weights[t]
    total = pix_w.sum()
    logp = np.take_along_axis(shifted - np.log(exp.sum(axis=1, keepdims=True)),
                              t[:, None], axis=1)[:, 0]
    loss = float(-(pix_w * logp).sum() / total)
    grad = prob
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1, axis=1)
    grad *= (pix_w / total)[:, None]
    return loss, grad
