"""Network building blocks: conv2d, batch norm, pooling, dropout, dense.

Convolution and pooling are fused ops with hand-written backward passes
(im2col + one GEMM for conv); everything is differentiable through the
tensor engine. Layers that own state (parameters, batch-norm running
statistics) are plain classes; stateless pieces are free functions.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor, _node, add, matmul

# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def _conv_cols(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """im2col with a (N, C*kh*kw, oh*ow) layout built tap by tap, so the
    reshape before the GEMM is free."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of (N,C,H,W) input with an (O,C,kh,kw) kernel.

    Output spatial size is floor((H + 2p - k) / s) + 1 per axis.
    """
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = kernel.shape
    sh, sw = stride
    ph, pw = padding
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {in_ch}")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _conv_cols(xp, kh, kw, sh, sw, oh, ow)  # (N, K, P)
    wmat = kernel.data.reshape(out_ch, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, out_ch, oh, ow)
    out += bias.data[None, :, None, None]

    def grad_fn(g):
        g3 = g.reshape(n, out_ch, oh * ow)
        dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(out_ch, c, kh, kw)
        db = g.sum(axis=(0, 2, 3))
        dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, i, j]
        dx = dxp[:, :, ph : hp - ph, pw : wp - pw] if (ph or pw) else dxp
        return dx, dw, db

    return _node(out, (x, kernel, bias), grad_fn)


def maxpool2d(x: Tensor, pool=(1, 2), stride=None) -> Tensor:
    """Max pooling; ties inside a window resolve to the first (lowest flat
    index) element, matching the max-reduction rule."""
    ph, pw = pool
    sh, sw = stride if stride is not None else pool
    n, c, h, w = x.shape
    if ph > h or pw > w:
        raise ShapeError(f"maxpool2d: window ({ph},{pw}) larger than input ({h},{w})")
    oh = (h - ph) // sh + 1
    ow = (w - pw) // sw + 1
    taps = [
        x.data[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
        for i in range(ph)
        for j in range(pw)
    ]
    out = np.maximum.reduce(taps) if len(taps) > 1 else taps[0].copy()

    def grad_fn(g):
        # argmax only when gradients are needed; tap order is row-major
        # inside the window, so the first maximum wins ties
        arg = np.stack(taps, axis=-1).argmax(axis=-1)
        ni, ci, ohi, owi = np.indices((n, c, oh, ow))
        rows = ohi * sh + arg // pw
        cols = owi * sw + arg % pw
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return _node(out, (x,), grad_fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    eps: float = 1e-5,
    train: bool,
):
    """Per-channel batch normalization over an (N,C,H,W) tensor.

    Train mode normalizes by the batch statistics and returns them so the
    caller can update its running estimates; eval mode is a pure affine
    function of the stored statistics. Returns ``(y, (mean, var))`` in
    train mode and ``(y, None)`` in eval mode.
    """
    n, c, h, w = x.shape
    m = n * h * w
    if train:
        if m < 2:
            raise DataError("batch norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats = (mu, var)
    else:
        mu, var = running_mean, running_var
        stats = None
    invstd = 1.0 / np.sqrt(var + eps)

    if train:
        xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:
        # fold the affine into one scale/shift pair: two passes over x
        scale = gamma.data * invstd
        shift = beta.data - mu * scale
        out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

        def grad_fn(g):
            xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * scale[None, :, None, None]
            return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), grad_fn), stats


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p) at train time,
    so eval mode is the exact identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an explicit RNG")
    scale = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# stateful layers
# ---------------------------------------------------------------------------


class Conv2D:
    """Convolution layer with kernel (out_ch, in_ch, kh, kw) and bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=(1, 1), padding=(0, 0),
                 *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        kh, kw = kernel_size
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        fan_in = in_channels * kh * kw
        self.kernel = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("kernel", self.kernel), ("bias", self.bias)]


class BatchNorm2D:
    """Batch normalization with learned affine and running statistics.

    Running stats update as run <- (1 - momentum)*run + momentum*batch;
    the stored variance is the biased batch estimate.
    """

    def __init__(self, channels, *, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"momentum must be in (0, 1], got {momentum}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        out, stats = batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, train=train,
        )
        if train:
            mu, var = stats
            m = self.momentum
            self.running_mean[...] = (1.0 - m) * self.running_mean + m * mu
            self.running_var[...] = (1.0 - m) * self.running_var + m * var
        return out

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class MaxPool2D:
    def __init__(self, pool=(1, 2), stride=None):
        self.pool = tuple(pool)
        self.stride = tuple(stride) if stride is not None else self.pool

    def __call__(self, x: Tensor) -> Tensor:
        return maxpool2d(x, self.pool, self.stride)


class Dropout:
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def __call__(self, x: Tensor, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
        return dropout(x, self.p, rng, train)


class Linear:
    """Dense layer computing x @ weight + bias with weight (in, out)."""

    def __init__(self, in_features, out_features, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.weight = Tensor(
            kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]
