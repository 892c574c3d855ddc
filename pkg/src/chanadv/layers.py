"""Layers shared by the baseline CNN and the channel-adversarial model.

Layer classes only hold parameters; the forward computations are functions
taking the layer as an argument, and all of them record on the active tape.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import ShapeError, Tensor, record, reshape

__all__ = [
    "Conv2dLayer",
    "LinearLayer",
    "BatchNormLayer",
    "LstmLayer",
    "glorot_uniform",
    "conv2d",
    "pool2d",
    "global_average_pool",
    "linear",
    "batchnorm",
    "dropout",
    "lstm_sequence",
    "lstm_batch",
    "gradient_reversal",
]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Conv2dLayer:
    """3x3 kernel, stride 1, zero padding 1."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.weight = Tensor(
            glorot_uniform(rng, (out_channels, in_channels, 3, 3), in_channels * 9, out_channels * 9),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class LinearLayer:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(glorot_uniform(rng, (d_in, d_out), d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class BatchNormLayer:
    """Per-channel normalization; running statistics move only in train mode."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class LstmLayer:
    """Concatenated-input LSTM: z = [x, h] @ W + b with gate blocks (i, f, g, o)."""

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden = hidden
        w = glorot_uniform(rng, (input_dim + hidden, 4 * hidden), input_dim + hidden, hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate starts open
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def conv2d(x: Tensor, layer: Conv2dLayer) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}")
    w, b = layer.weight, layer.bias
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, layer expects {w.shape[1]}")
    xd, wd = x.data, w.data
    y = kernels.conv3x3_forward(xd, wd, b.data)
    return record(y, (x, w, b), lambda g: kernels.conv3x3_backward(xd, wd, g))


def pool2d(x: Tensor, mode: str = "max") -> Tensor:
    """2x2 window, stride 2; a trailing odd row/column is dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"pool2d needs H,W >= 2, got {(h, w)}")
    shape = x.shape
    if mode == "max":
        y, arg = kernels.maxpool2_forward(x.data)
        return record(y, (x,), lambda g: (kernels.maxpool2_backward(g, arg, shape),))
    if mode == "average":
        ho, wo = h // 2, w // 2
        y = x.data[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))

        def vjp(g):
            gx = np.zeros(shape)
            gx[:, :, :2 * ho, :2 * wo] = np.repeat(np.repeat(g / 4.0, 2, axis=2), 2, axis=3)
            return (gx,)

        return record(y, (x,), vjp)
    raise ValueError(f"unknown pooling mode {mode!r}")


def global_average_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    shape = x.shape
    return record(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    return record(xd @ wd + bias.data, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def batchnorm(x: Tensor, layer: BatchNormLayer, mode: str = "train") -> Tensor:
    """Normalize per channel over every axis except 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    gamma, beta = layer.gamma, layer.beta
    if mode == "infer":
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        scale = (gamma.data * inv).reshape(bshape)
        shift = (beta.data - layer.running_mean * gamma.data * inv).reshape(bshape)
        xd = x.data
        xhat = (xd - layer.running_mean.reshape(bshape)) * inv.reshape(bshape)

        def vjp_infer(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return record(xd * scale + shift, (x, gamma, beta), vjp_infer)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ShapeError("batchnorm in train mode needs a batch of at least 2")
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    count = x.data.size // x.shape[1]
    layer.running_mean *= layer.momentum
    layer.running_mean += (1.0 - layer.momentum) * mu
    layer.running_var *= layer.momentum
    layer.running_var += (1.0 - layer.momentum) * var
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def vjp(g):
        gxhat = g * gd
        gx = (inv.reshape(bshape) / count) * (
            count * gxhat
            - gxhat.sum(axis=axes).reshape(bshape)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out, (x, gamma, beta), vjp)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``mode == 'infer'`` or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def lstm_batch(x: Tensor, layer: LstmLayer, h0=None, c0=None) -> Tensor:
    """LSTM over a batch of sequences: [M,T,d_in] -> hidden states [M,T,H].

    The whole recurrence is one tape node; its backward pass is
    backpropagation through time.  ``h0``/``c0`` default to zeros and are
    treated as constants.
    """
    if x.ndim != 3 or x.shape[2] != layer.input_dim:
        raise ShapeError(f"lstm: expected [M,T,{layer.input_dim}], got {x.shape}")
    m, t_len, d = x.shape
    if t_len < 1:
        raise ShapeError("lstm needs at least one time step")
    hd = layer.hidden
    h0 = np.zeros((m, hd)) if h0 is None else np.asarray(h0, dtype=np.float64).reshape(m, hd)
    c0 = np.zeros((m, hd)) if c0 is None else np.asarray(c0, dtype=np.float64).reshape(m, hd)
    w, b = layer.weight, layer.bias
    wx, wh = w.data[:d], np.ascontiguousarray(w.data[d:])
    xd = x.data
    xw = (xd.reshape(m * t_len, d) @ wx + b.data).reshape(m, t_len, 4 * hd)
    hs, cs, gates = kernels.lstm_forward(xw, wh, h0, c0)

    def vjp(g):
        gxw, gwh, _, _ = kernels.lstm_backward(np.ascontiguousarray(g), hs, cs, gates, wh, h0, c0)
        gxw2 = gxw.reshape(m * t_len, 4 * hd)
        gx = (gxw2 @ wx.T).reshape(m, t_len, d)
        gw = np.concatenate([xd.reshape(m * t_len, d).T @ gxw2, gwh], axis=0)
        return gx, gw, gxw2.sum(axis=0)

    return record(hs, (x, w, b), vjp)


def lstm_sequence(x: Tensor, layer: LstmLayer, h0=None, c0=None) -> Tensor:
    """Single sequence [T,d_in] -> [T,H]."""
    if x.ndim != 2:
        raise ShapeError(f"lstm_sequence expects [T,d_in], got {x.shape}")
    t_len, d = x.shape
    out = lstm_batch(reshape(x, (1, t_len, d)), layer, h0, c0)
    return reshape(out, (t_len, layer.hidden))


def gradient_reversal(x: Tensor, beta: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by -beta."""
    beta = float(beta)
    if not beta >= 0.0:
        raise ValueError(f"gradient reversal needs beta >= 0, got {beta}")
    return record(x.data, (x,), lambda g: (g * -beta,))
