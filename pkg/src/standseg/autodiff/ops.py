"""Differentiable layers over (batch, channel, height, width) tensors.

Every op returns a new :class:`Tensor`; gradients flow only into inputs that
have ``requires_grad`` set. Arithmetic follows the dtype of the input, so the
same code serves float32 training and float64 gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ConfigError, ShapeError, StateError
from .tensor import Tensor, as_tensor, make_result

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D (n, c, h, w) tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * w)


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding of (k - 1) / 2."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv2d")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {cin}")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, w)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, cout, h * w)
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            weight.accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, cin, k, k, h, w)
            gxp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + h, j : j + w] += gcols[:, :, i, j]
            x.accumulate(gxp[:, :, p : p + h, p : p + w] if p else gxp)

    return make_result(out, parents, backward)


def transposed_conv2d(x, weight, bias=None) -> Tensor:
    """2x2 kernel, stride 2, no padding: doubles height and width exactly.

    ``weight`` has shape (cin, cout, 2, 2); output pixel (2y+i, 2x+j) receives
    ``sum_c x[c, y, x] * weight[c, :, i, j]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "transposed_conv2d")
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise ShapeError(
            f"transposed_conv2d: weights {weight.shape} incompatible with input {x.shape}"
        )
    cout = weight.shape[1]
    x2 = x.data.reshape(n, c, h * w)
    w2 = weight.data.reshape(c, cout * 4)
    y = np.matmul(w2.T, x2).reshape(n, cout, 2, 2, h, w)
    out = np.ascontiguousarray(y.transpose(0, 1, 4, 2, 5, 3)).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        g6 = g.reshape(n, cout, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4)
        g2 = np.ascontiguousarray(g6).reshape(n, cout * 4, h * w)
        if x.requires_grad:
            x.accumulate(np.matmul(w2, g2).reshape(x.shape))
        if weight.requires_grad:
            gw = np.tensordot(x2, g2, axes=([0, 2], [0, 2]))
            weight.accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    return make_result(out, parents, backward)


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    position in row-major order."""
    x = as_tensor(x)
    _check4(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        scatter = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(scatter, idx[..., None], g[..., None], axis=-1)
        scatter = scatter.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x.accumulate(scatter.reshape(n, c, h, w))

    return make_result(out, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    Stats stay ``None`` until the first training step, which seeds them with
    that batch's statistics; later steps blend with ``momentum``.
    """

    channels: int
    momentum: float = BN_MOMENTUM
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if not self.initialized:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
        else:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean
            self.running_var = m * self.running_var + (1.0 - m) * var


def batchnorm2d(
    x,
    scale,
    shift,
    state: BatchNormState | None = None,
    mode: str = "train",
    eps: float = BN_EPSILON,
) -> Tensor:
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    _check4(x, "batchnorm2d")
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batchnorm2d: scale/shift must have shape ({c},)")
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        centered = x.data - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
        if state is not None:
            state.update(mean, var)
    elif mode == "infer":
        if state is None or not state.initialized:
            raise StateError("batchnorm2d: inference requested before any training step")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        centered = x.data - mean[None, :, None, None]
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if scale.requires_grad:
            scale.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            shift.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None, None]
            if mode == "train":
                s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (gxhat - s1 / m - xhat * (s2 / m)) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
            x.accumulate(gx)

    return make_result(out, (x, scale, shift), backward)


def spatial_dropout2d(
    x,
    rate: float,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    keep: np.ndarray | None = None,
) -> Tensor:
    """Zero whole (sample, channel) planes with probability ``rate``.

    ``keep`` forces a boolean (n, c) survival mask instead of sampling one.
    """
    x = as_tensor(x)
    _check4(x, "spatial_dropout2d")
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or (rate == 0.0 and keep is None):
        return x
    n, c = x.shape[:2]
    if keep is None:
        if rng is None:
            raise ConfigError("spatial_dropout2d in train mode needs an rng")
        keep = rng.random((n, c)) >= rate
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (n, c):
        raise ShapeError(f"dropout mask must have shape {(n, c)}, got {keep.shape}")
    factor = (keep / (1.0 - rate)).astype(x.dtype)[:, :, None, None]
    out = x.data * factor

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * factor)

    return make_result(out, (x,), backward)


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = expit(x.data)
    out = x.data * s

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * (s + x.data * s * (1.0 - s)))

    return make_result(out, (x,), backward)


def softmax_channels(x) -> Tensor:
    """Per-pixel softmax across axis 1, stabilised by max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x.accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return make_result(p, (x,), backward)


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g[:, :ca])
        if b.requires_grad:
            b.accumulate(g[:, ca:])

    return make_result(out, (a, b), backward)


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal samples with standard deviation sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
