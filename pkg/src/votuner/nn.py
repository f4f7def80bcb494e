"""Minimal dense/conv networks with exact reverse-mode gradients.

Everything is plain NumPy float64.  Parameters are exposed as flat lists of
arrays so one Adam state can drive any combination of networks.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from .errors import DimensionMismatch


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(rows, cols))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == (rows, cols) else vt
    return gain * q


class MlpNet:
    """Fully-connected net, tanh hidden activations, linear output."""

    def __init__(self, sizes: List[int], rng: Optional[np.random.Generator] = None,
                 final_gain: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        if rng is None:
            rng = np.random.default_rng()
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for k in range(len(sizes) - 1):
            gain = final_gain if k == len(sizes) - 2 else math.sqrt(2.0)
            self.weights.append(orthogonal_init(rng, sizes[k + 1], sizes[k], gain))
            self.biases.append(np.zeros(sizes[k + 1]))

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: List[np.ndarray]) -> None:
        n = len(self.weights)
        if len(params) != 2 * n:
            raise DimensionMismatch("parameter list length mismatch")
        for k in range(n):
            self.weights[k] = params[2 * k]
            self.biases[k] = params[2 * k + 1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.sizes[0]:
            raise DimensionMismatch(f"input dim {h.shape[1]} != {self.sizes[0]}")
        n = len(self.weights)
        for k in range(n):
            z = h @ self.weights[k].T + self.biases[k]
            h = np.tanh(z) if k < n - 1 else z
        return h[0] if squeeze else h


def mlp_backward(net: MlpNet, x: np.ndarray, upstream: np.ndarray):
    """Exact gradients of `sum(upstream * net(x))` with respect to parameters
    and input.  Returns (param_grads matching net.params order, input_grad)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    g = np.asarray(upstream, dtype=np.float64)
    g = g.reshape(1, -1) if squeeze else g
    if h.shape[1] != net.sizes[0]:
        raise DimensionMismatch(f"input dim {h.shape[1]} != {net.sizes[0]}")
    if g.shape[-1] != net.sizes[-1]:
        raise DimensionMismatch(f"upstream dim {g.shape[-1]} != {net.sizes[-1]}")

    n = len(net.weights)
    inputs = []
    acts = []
    cur = h
    for k in range(n):
        inputs.append(cur)
        z = cur @ net.weights[k].T + net.biases[k]
        cur = np.tanh(z) if k < n - 1 else z
        acts.append(cur)

    grads: List[np.ndarray] = [None] * (2 * n)
    delta = g
    for k in range(n - 1, -1, -1):
        grads[2 * k] = delta.T @ inputs[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[k]
        if k > 0:
            delta = delta * (1.0 - acts[k - 1] ** 2)
    input_grad = delta[0] if squeeze else delta
    return grads, input_grad


class AdamState:
    """Per-parameter first/second moment accumulators with bias correction."""

    def __init__(self, params: List[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params: List[np.ndarray], grads: List[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place Adam update; returns the params list for convenience."""
    if len(params) != len(grads):
        raise DimensionMismatch("params/grads length mismatch")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c * k * k, oh * ow))
    idx = 0
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            cols[:, idx * c : (idx + 1) * c, :] = patch.reshape(b, c, -1)
            idx += 1
    return cols, oh, ow


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int):
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    idx = 0
    for dy in range(k):
        for dx in range(k):
            patch = cols[:, idx * c : (idx + 1) * c, :].reshape(b, c, oh, ow)
            xp[:, :, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride] += patch
            idx += 1
    return xp[:, :, pad : pad + h, pad : pad + w]


class ConvEncoder:
    """Three stride-2 3x3 conv stages with ReLU, then a linear projection.

    Operates on (batch, 1, side, side) zero-centered thumbnails and emits
    `latent_dim` features.
    """

    KERNEL = 3
    STRIDE = 2
    PAD = 1

    def __init__(self, side: int = 64, channels=(8, 16, 32), latent_dim: int = 32,
                 rng: Optional[np.random.Generator] = None):
        if rng is None:
            rng = np.random.default_rng()
        self.side = side
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.conv_w: List[np.ndarray] = []
        self.conv_b: List[np.ndarray] = []
        c_in = 1
        s = side
        for c_out in channels:
            fan_in = c_in * self.KERNEL * self.KERNEL
            self.conv_w.append(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                          size=(c_out, c_in, self.KERNEL, self.KERNEL)))
            self.conv_b.append(np.zeros(c_out))
            c_in = c_out
            s = (s + 2 * self.PAD - self.KERNEL) // self.STRIDE + 1
        self.flat_dim = c_in * s * s
        self.out_side = s
        self.proj_w = orthogonal_init(rng, latent_dim, self.flat_dim, 1.0)
        self.proj_b = np.zeros(latent_dim)

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.append(w)
            out.append(b)
        out.append(self.proj_w)
        out.append(self.proj_b)
        return out

    def set_params(self, params: List[np.ndarray]) -> None:
        n = len(self.conv_w)
        if len(params) != 2 * n + 2:
            raise DimensionMismatch("parameter list length mismatch")
        for k in range(n):
            self.conv_w[k] = params[2 * k]
            self.conv_b[k] = params[2 * k + 1]
        self.proj_w = params[2 * n]
        self.proj_b = params[2 * n + 1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.side or x.shape[3] != self.side:
            raise DimensionMismatch(f"expected (B, 1, {self.side}, {self.side}), got {x.shape}")
        caches = []
        cur = x
        for w, b in zip(self.conv_w, self.conv_b):
            cols, oh, ow = _im2col(cur, self.KERNEL, self.STRIDE, self.PAD)
            f = w.shape[0]
            z = np.einsum("fi,bip->bfp", w.reshape(f, -1), cols) + b[None, :, None]
            z = z.reshape(cur.shape[0], f, oh, ow)
            relu = np.maximum(z, 0.0)
            caches.append((cur.shape, cols, z, oh, ow))
            cur = relu
        flat = cur.reshape(cur.shape[0], -1)
        out = flat @ self.proj_w.T + self.proj_b
        caches.append(flat)
        return out, caches

    def backward(self, caches, upstream: np.ndarray):
        """Gradients matching .params order plus the input gradient."""
        flat = caches[-1]
        g_proj_w = upstream.T @ flat
        g_proj_b = upstream.sum(axis=0)
        delta_flat = upstream @ self.proj_w

        b = flat.shape[0]
        c_last = self.channels[-1]
        delta = delta_flat.reshape(b, c_last, self.out_side, self.out_side)
        conv_grads = []
        for k in range(len(self.conv_w) - 1, -1, -1):
            x_shape, cols, z, oh, ow = caches[k]
            delta = delta * (z > 0.0)
            dflat = delta.reshape(b, self.conv_w[k].shape[0], -1)
            gw = np.einsum("bfp,bip->fi", dflat, cols).reshape(self.conv_w[k].shape)
            gb = dflat.sum(axis=(0, 2))
            dcols = np.einsum("fi,bfp->bip", self.conv_w[k].reshape(self.conv_w[k].shape[0], -1), dflat)
            dx = _col2im(dcols, x_shape, self.KERNEL, self.STRIDE, self.PAD, oh, ow)
            conv_grads.append((gw, gb))
            delta = dx
        grads: List[np.ndarray] = []
        for gw, gb in reversed(conv_grads):
            grads.append(gw)
            grads.append(gb)
        grads.append(g_proj_w)
        grads.append(g_proj_b)
        return grads, delta
