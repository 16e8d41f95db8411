"""Layers with explicit forward/backward passes over float64 numpy arrays.

Every layer caches what it needs during ``forward`` and consumes that cache
in ``backward``. Calling ``backward`` twice without an intervening
``forward`` raises :class:`BackwardStateError`.

Image tensors use the (batch, channels, height, width) layout; sequences use
(batch, time, features).
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64


class ShapeError(ValueError):
    """Input shape does not match what a layer was configured for."""


class BackwardStateError(RuntimeError):
    """``backward`` was called without a matching ``forward``."""


class Parameter:
    """A trainable array with its gradient accumulator."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class. Subclasses implement ``_forward`` and ``_backward``."""

    def __init__(self, name: str = ""):
        self.name = name
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return []

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(p.name, p) for p in self.parameters()]

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        """Shape inference without batch dimension. Raises ShapeError."""
        return tuple(input_shape)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        self.output_shape(x.shape[1:])
        y, self._cache = self._forward(x)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise BackwardStateError(
                f"backward called on {type(self).__name__} {self.name!r} without a preceding forward"
            )
        cache, self._cache = self._cache, None
        return self._backward(np.asarray(grad_out, dtype=DTYPE), cache)

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, grad_out, cache):
        raise NotImplementedError


class Dense(Layer):
    """y = x @ W + b over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 init: str = "glorot", name: str = "dense"):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        if init == "he":
            w = he_uniform(rng, (in_features, out_features), in_features)
        else:
            w = glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if len(input_shape) < 1 or input_shape[-1] != self.in_features:
            raise ShapeError(
                f"{self.name}: expected input (..., {self.in_features}), got {tuple(input_shape)}"
            )
        return tuple(input_shape[:-1]) + (self.out_features,)

    def _forward(self, x):
        return x @ self.weight.value + self.bias.value, x

    def _backward(self, g, x):
        xf = x.reshape(-1, self.in_features)
        gf = g.reshape(-1, self.out_features)
        self.weight.grad += xf.T @ gf
        self.bias.grad += gf.sum(axis=0)
        return g @ self.weight.value.T


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        super().__init__(name)

    def _forward(self, x):
        mask = x > 0
        return x * mask, mask

    def _backward(self, g, mask):
        return g * mask


class Tanh(Layer):
    def __init__(self, name: str = "tanh"):
        super().__init__(name)

    def _forward(self, x):
        y = np.tanh(x)
        return y, y

    def _backward(self, g, y):
        return g * (1.0 - y * y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    def __init__(self, name: str = "sigmoid"):
        super().__init__(name)

    def _forward(self, x):
        y = sigmoid(x)
        return y, y

    def _backward(self, g, y):
        return g * y * (1.0 - y)


class Flatten(Layer):
    def __init__(self, name: str = "flatten"):
        super().__init__(name)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def _forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward(self, g, shape):
        return g.reshape(shape)


class Reshape(Layer):
    def __init__(self, shape: Sequence[int], name: str = "reshape"):
        super().__init__(name)
        self.shape = tuple(shape)

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"{self.name}: cannot reshape {tuple(input_shape)} to {self.shape}")
        return self.shape

    def _forward(self, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def _backward(self, g, shape):
        return g.reshape(shape)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int,
                               output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> contiguous (B*Ho*Wo, C*k*k) patch matrix."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = as_strided(xp, (b, ho, wo, c, k, k), (sb, s * sh, s * sw, sc, sh, sw), writeable=False)
    return view.reshape(b * ho * wo, c * k * k)


def col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches into a (B, C, Hp, Wp) array."""
    b, c, hp, wp = shape
    patches = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2).copy()  # (B, C, k, k, Ho, Wo)
    out = np.zeros(shape, dtype=DTYPE)
    if s == 1:
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + ho, j:j + wo] += patches[:, :, i, j]
        return out
    # accumulate each stride phase densely, then interleave; strided adds are slow
    for a in range(s):
        for bb in range(s):
            rows = [i for i in range(k) if i % s == a]
            cols_ = [j for j in range(k) if j % s == bb]
            if not rows or not cols_:
                continue
            buf = np.zeros((b, c, len(range(a, hp, s)), len(range(bb, wp, s))), dtype=DTYPE)
            for i in rows:
                for j in cols_:
                    oi, oj = i // s, j // s
                    buf[:, :, oi:oi + ho, oj:oj + wo] += patches[:, :, i, j]
            out[:, :, a::s, bb::s] = buf
    return out


class Conv2d(Layer):
    """2D convolution (cross-correlation), weight shape (out, in, k, k)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, init: str = "he",
                 name: str = "conv"):
        super().__init__(name)
        if stride < 1:
            raise ValueError("stride must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        fan_in = in_channels * k * k
        shape = (out_channels, in_channels, k, k)
        if init == "he":
            w = he_uniform(rng, shape, fan_in)
        else:
            w = glorot_uniform(rng, shape, fan_in, out_channels * k * k)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected input ({self.in_channels}, H, W), got {tuple(input_shape)}"
            )
        _, h, w = input_shape
        ho = conv_output_size(h, self.kernel_size, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel_size, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {tuple(input_shape)} too small for kernel")
        return (self.out_channels, ho, wo)

    def _forward(self, x):
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
        _, ho, wo = self.output_shape(x.shape[1:])
        cols = im2col(xp, k, s, ho, wo)
        wm = self.weight.value.reshape(self.out_channels, -1)
        y = (cols @ wm.T).reshape(x.shape[0], ho, wo, self.out_channels)
        y = y.transpose(0, 3, 1, 2) + self.bias.value[None, :, None, None]
        return y, (x.shape, xp.shape, cols)

    def _backward(self, g, cache):
        x_shape, xp_shape, cols = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        _, o, ho, wo = g.shape
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        wm = self.weight.value.reshape(o, -1)
        self.weight.grad += (gf.T @ cols).reshape(self.weight.shape)
        self.bias.grad += gf.sum(axis=0)
        gxp = col2im(gf @ wm, xp_shape, k, s, ho, wo)
        if p:
            gxp = gxp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return gxp


class ConvTranspose2d(Layer):
    """Transposed 2D convolution, weight shape (in, out, k, k).

    With kernel 3, stride 2, padding 1, output_padding 1 the spatial size
    doubles, mirroring a stride-2 ``Conv2d`` with padding 1.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, output_padding: int = 0, rng: np.random.Generator | None = None,
                 init: str = "he", name: str = "deconv"):
        super().__init__(name)
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if output_padding >= stride and output_padding > 0:
            raise ValueError("output_padding must be smaller than stride")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        k = kernel_size
        shape = (in_channels, out_channels, k, k)
        # fan-in as seen by each output pixel
        fan_in = max(1, in_channels * k * k // (stride * stride))
        if init == "he":
            w = he_uniform(rng, shape, fan_in)
        else:
            w = glorot_uniform(rng, shape, fan_in, out_channels * k * k // (stride * stride) or 1)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected input ({self.in_channels}, H, W), got {tuple(input_shape)}"
            )
        _, h, w = input_shape
        args = (self.kernel_size, self.stride, self.padding, self.output_padding)
        ho, wo = conv_transpose_output_size(h, *args), conv_transpose_output_size(w, *args)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {tuple(input_shape)} gives empty output")
        return (self.out_channels, ho, wo)

    def _full_size(self, h: int) -> int:
        return (h - 1) * self.stride + self.kernel_size + self.output_padding

    def _forward(self, x):
        k, s, p = self.kernel_size, self.stride, self.padding
        b, cin, h, w = x.shape
        _, ho, wo = self.output_shape(x.shape[1:])
        xf = x.transpose(0, 2, 3, 1).reshape(-1, cin)
        cols = xf @ self.weight.value.reshape(cin, -1)
        full_shape = (b, self.out_channels, self._full_size(h), self._full_size(w))
        full = col2im(cols, full_shape, k, s, h, w)
        y = full[:, :, p:p + ho, p:p + wo] + self.bias.value[None, :, None, None]
        return y, (xf, x.shape, full_shape)

    def _backward(self, g, cache):
        xf, x_shape, full_shape = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        b, cin, h, w = x_shape
        self.bias.grad += g.sum(axis=(0, 2, 3))
        gfull = np.zeros(full_shape, dtype=DTYPE)
        gfull[:, :, p:p + g.shape[2], p:p + g.shape[3]] = g
        cols = im2col(gfull, k, s, h, w)
        wm = self.weight.value.reshape(cin, -1)
        self.weight.grad += (xf.T @ cols).reshape(self.weight.shape)
        return (cols @ wm.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)


class LSTM(Layer):
    """Long short-term memory layer unrolled over (batch, time, features).

    Gate order in the fused weight is input, forget, cell, output. ``forward``
    caches the whole sequence for backpropagation through time; ``step`` is a
    cache-free single step for inference.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0, name: str = "lstm"):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        n = input_size + hidden_size
        w = glorot_uniform(rng, (n, 4 * hidden_size), n, hidden_size)
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = forget_bias
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(b, f"{name}.bias")
        self.last_state: tuple[np.ndarray, np.ndarray] | None = None

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if len(input_shape) != 2 or input_shape[1] != self.input_size:
            raise ShapeError(
                f"{self.name}: expected input (T, {self.input_size}), got {tuple(input_shape)}"
            )
        return (input_shape[0], self.hidden_size)

    def zero_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        return (np.zeros((batch, self.hidden_size)), np.zeros((batch, self.hidden_size)))

    def _gates(self, x_t, h, c):
        hs = self.hidden_size
        a = np.concatenate([x_t, h], axis=1) @ self.weight.value + self.bias.value
        i = sigmoid(a[:, :hs])
        f = sigmoid(a[:, hs:2 * hs])
        g = np.tanh(a[:, 2 * hs:3 * hs])
        o = sigmoid(a[:, 3 * hs:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        return i, f, g, o, c_new, tc, o * tc

    def step(self, x_t: np.ndarray, state: tuple[np.ndarray, np.ndarray]):
        x_t = np.asarray(x_t, dtype=DTYPE)
        h, c = state
        if x_t.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ShapeError(
                f"{self.name}: step expects x (B, {self.input_size}) and h (B, {self.hidden_size}), "
                f"got {x_t.shape} and {h.shape}"
            )
        *_, c_new, _, h_new = self._gates(x_t, h, c)
        return h_new, c_new

    def forward(self, x: np.ndarray, state: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        self.output_shape(x.shape[1:])
        if state is None:
            state = self.zero_state(x.shape[0])
        y, self._cache = self._forward(x, state)
        return y

    def _forward(self, x, state):
        h, c = state
        steps = []
        out = np.empty((x.shape[0], x.shape[1], self.hidden_size))
        for t in range(x.shape[1]):
            xh = np.concatenate([x[:, t], h], axis=1)
            i, f, g, o, c_new, tc, h_new = self._gates(x[:, t], h, c)
            steps.append((xh, c, i, f, g, o, tc))
            h, c = h_new, c_new
            out[:, t] = h
        self.last_state = (h, c)
        return out, steps

    def _backward(self, grad_out, steps):
        hs = self.hidden_size
        dh_next = np.zeros((grad_out.shape[0], hs))
        dc_next = np.zeros((grad_out.shape[0], hs))
        dx = np.empty((grad_out.shape[0], grad_out.shape[1], self.input_size))
        for t in reversed(range(len(steps))):
            xh, c_prev, i, f, g, o, tc = steps[t]
            dh = grad_out[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            da = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            self.weight.grad += xh.T @ da
            self.bias.grad += da.sum(axis=0)
            dxh = da @ self.weight.value.T
            dx[:, t] = dxh[:, :self.input_size]
            dh_next = dxh[:, self.input_size:]
        return dx


class Sequential(Layer):
    """Chain of layers; parameter names are prefixed by the chain's name."""

    def __init__(self, layers: Iterable[Layer], name: str = "seq"):
        super().__init__(name)
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        for layer in self.layers:
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, grad_out):
        if self._cache is None:
            raise BackwardStateError(f"backward called on Sequential {self.name!r} without forward")
        self._cache = None
        g = np.asarray(grad_out, dtype=DTYPE)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
