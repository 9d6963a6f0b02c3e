"""Forward and backward passes for the layer kinds of the gesture network.

Every layer exposes ``forward(x, training=False, rng=None) -> (y, cache)``
and ``backward(cache, dy) -> LayerGrads``. Parameters live in
``layer.params`` (an ordered dict of numpy arrays) and are only read here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, NumericError, ShapeError

KERNEL = 3


@dataclass
class LayerGrads:
    params: dict = field(default_factory=dict)
    input: np.ndarray = None


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    if x.shape != dy.shape:
        raise ShapeError(f"relu gradient shape {dy.shape} != cached input {x.shape}")
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def softmax(scores, axis=-1):
    """Numerically stable softmax along ``axis``."""
    s = np.asarray(scores)
    if not np.all(np.isfinite(s)):
        raise NumericError("softmax received non-finite scores")
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def im2col(x, k=KERNEL):
    """(N,H,W,C) -> (N*Ho*Wo, k*k*C) with columns ordered (di, dj, c)."""
    n, h, w, c = x.shape
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # N,Ho,Wo,C,k,k
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(cols).reshape(n * (h - k + 1) * (w - k + 1), k * k * c)


def col2im(cols, x_shape, k=KERNEL):
    n, h, w, c = x_shape
    ho, wo = h - k + 1, w - k + 1
    cols = cols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            dx[:, di:di + ho, dj:dj + wo, :] += cols[:, :, :, di, dj, :]
    return dx


def conv2d_direct(x, kernels, bias):
    """Nested-loop valid convolution, stride 1. Reference oracle for tests."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernels.shape
    out = np.zeros((n, h - kh + 1, w - kw + 1, cout), dtype=np.result_type(x, kernels))
    for b in range(n):
        for i in range(h - kh + 1):
            for j in range(w - kw + 1):
                for o in range(cout):
                    acc = bias[o]
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += x[b, i + di, j + dj, c] * kernels[di, dj, c, o]
                    out[b, i, j, o] = acc
    return out


def conv2d_forward(x, kernels, bias):
    """im2col + matmul valid 3x3 convolution on an NHWC batch."""
    n, h, w, c = x.shape
    if kernels.shape[:3] != (KERNEL, KERNEL, c):
        raise ShapeError(f"input has {c} channels but kernels are {kernels.shape}")
    if h < KERNEL or w < KERNEL:
        raise ShapeError(f"spatial extent {h}x{w} smaller than the 3x3 kernel")
    cols = im2col(x)
    out = cols @ kernels.reshape(-1, kernels.shape[3]) + bias
    return out.reshape(n, h - KERNEL + 1, w - KERNEL + 1, kernels.shape[3]), cols


class Layer:
    name = "layer"
    params: dict

    def __init__(self):
        self.params = {}

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, kernels, bias, activation="relu", name="conv"):
        super().__init__()
        if kernels.ndim != 4 or kernels.shape[:2] != (KERNEL, KERNEL):
            raise ShapeError(f"conv kernels must be 3x3xCinxCout, got {kernels.shape}")
        if bias.shape != (kernels.shape[3],):
            raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[3]} filters")
        self.params = {"kernel": kernels, "bias": bias}
        self.activation = activation
        self.name = name

    @property
    def filters(self):
        return self.params["kernel"].shape[3]

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.params["kernel"].shape[2]:
            raise ShapeError(f"{self.name}: expected {self.params['kernel'].shape[2]} channels, got {c}")
        if h < KERNEL or w < KERNEL:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for a 3x3 kernel")
        return (h - 2, w - 2, self.filters)

    def forward(self, x, training=False, rng=None):
        z, cols = conv2d_forward(x, self.params["kernel"], self.params["bias"])
        y = relu(z) if self.activation == "relu" else z
        return y, (x.shape, cols, z)

    def backward(self, cache, dy):
        x_shape, cols, z = cache
        if dy.shape != z.shape:
            raise ShapeError(f"{self.name}: gradient shape {dy.shape} != output {z.shape}")
        if self.activation == "relu":
            dy = relu_backward(z, dy)
        k = self.params["kernel"]
        dy2 = dy.reshape(-1, k.shape[3])
        grads = {"kernel": (cols.T @ dy2).reshape(k.shape), "bias": dy2.sum(axis=0)}
        dx = col2im(dy2 @ k.reshape(-1, k.shape[3]).T, x_shape)
        return LayerGrads(grads, dx)


class MaxPool2D(Layer):
    """2x2 non-overlapping max pooling; an odd trailing row/column is dropped."""

    kind = "MaxPooling2D"

    def __init__(self, name="pool"):
        super().__init__()
        self.name = name

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if h < 2 or w < 2:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for 2x2 pooling")
        return (h // 2, w // 2, c)

    def forward(self, x, training=False, rng=None):
        n, h, w, c = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for 2x2 pooling")
        ho, wo = h // 2, w // 2
        win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
        win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        x_shape, idx = cache
        if dy.shape != idx.shape:
            raise ShapeError(f"{self.name}: gradient shape {dy.shape} != output {idx.shape}")
        n, h, w, c = x_shape
        ho, wo = h // 2, w // 2
        win = np.zeros((n, ho, wo, c, 4), dtype=dy.dtype)
        np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
        win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :2 * ho, :2 * wo, :] = win.reshape(n, 2 * ho, 2 * wo, c)
        return LayerGrads({}, dx)


class Dropout(Layer):
    """Inverted dropout: identity at inference, rescaled mask when training."""

    kind = "Dropout"

    def __init__(self, rate=0.5, name="dropout"):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.name = name

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0:
            mask = None if not training else np.ones(x.shape, dtype=bool)
            return x, mask
        if rng is None:
            raise ConfigError("training-mode dropout needs a random generator")
        mask = rng.random(x.shape) >= self.rate
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return x * mask * scale, mask

    def backward(self, cache, dy):
        mask = cache
        if mask is None:
            return LayerGrads({}, dy)
        if mask.shape != dy.shape:
            raise ShapeError(f"{self.name}: gradient shape {dy.shape} != mask {mask.shape}")
        scale = dy.dtype.type(1.0 / (1.0 - self.rate))
        return LayerGrads({}, dy * mask * scale)


class Flatten(Layer):
    kind = "Flatten"

    def __init__(self, name="flatten"):
        super().__init__()
        self.name = name

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return LayerGrads({}, dy.reshape(cache))


class Dense(Layer):
    kind = "Dense"

    def __init__(self, weights, bias, activation=None, name="dense"):
        super().__init__()
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise ShapeError(f"dense weights {weights.shape} / bias {bias.shape} mismatch")
        self.params = {"weight": weights, "bias": bias}
        self.activation = activation
        self.name = name

    @property
    def units(self):
        return self.params["weight"].shape[1]

    def output_shape(self, input_shape):
        (n_in,) = input_shape
        if n_in != self.params["weight"].shape[0]:
            raise ShapeError(f"{self.name}: expected {self.params['weight'].shape[0]} inputs, got {n_in}")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"{self.name}: input {x.shape} does not match weights {w.shape}")
        z = x @ w + self.params["bias"]
        y = relu(z) if self.activation == "relu" else z
        return y, (x, z)

    def backward(self, cache, dy):
        x, z = cache
        if dy.shape != z.shape:
            raise ShapeError(f"{self.name}: gradient shape {dy.shape} != output {z.shape}")
        if self.activation == "relu":
            dy = relu_backward(z, dy)
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        return LayerGrads(grads, dy @ self.params["weight"].T)
