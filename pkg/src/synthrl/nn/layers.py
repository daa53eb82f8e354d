"""Dense/conv layers with explicit reverse-mode gradients.

Layers cache whatever their backward pass needs during forward, so the call
discipline is strictly forward-then-backward on the same inputs; pure
"target" forwards are fine as long as they happen before the gradient-path
forward. Parameters are plain numpy arrays wrapped in :class:`Param` so
optimizers and checkpoints can address them by name. float32 is the
production dtype; float64 exists for gradient checking only.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class Param:
    """Named trainable array plus its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: Array):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name}, shape={tuple(self.value.shape)})"


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Array:
    """Uniform fan-in init, limit sqrt(3/fan_in)."""
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x: Array) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array) -> Array:
        raise NotImplementedError

    def __call__(self, x: Array) -> Array:
        return self.forward(x)


class Dense(Layer):
    """y = x @ W.T + b on 2-D batches."""

    def __init__(self, name: str, in_dim: int, out_dim: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Param(f"{name}.w", kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_dim, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (batch, {self.in_dim}) input, got {x.shape}")
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, grad: Array) -> Array:
        self.w.grad += grad.T @ self._x
        self.b.grad += grad.sum(axis=0)
        return grad @ self.w.value


class ReLU(Layer):
    def forward(self, x: Array) -> Array:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, grad: Array) -> Array:
        return grad * self._mask


class Tanh(Layer):
    def forward(self, x: Array) -> Array:
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad: Array) -> Array:
        return grad * (1.0 - self._y * self._y)


class Flatten(Layer):
    def forward(self, x: Array) -> Array:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Array) -> Array:
        return grad.reshape(self._shape)


class Conv2d(Layer):
    """Valid (no padding) square-kernel convolution on channels-last (NHWC)
    batches.

    Kernels are stored canonically as (out_ch, in_ch, kh, kw); compute uses a
    (kh*kw*in_ch, out_ch) reordering so the im2col gather keeps the channel
    axis contiguous. Backward scatters the column gradient back with one
    strided add per kernel tap.
    """

    def __init__(self, name: str, in_ch: int, out_ch: int, ksize: int = 3, stride: int = 1, *,
                 rng: np.random.Generator, dtype=np.float32, skip_input_grad: bool = False):
        if stride < 1:
            raise ValueError("stride must be positive")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        # input-layer convs never need dL/dx; skipping it saves the largest GEMM
        self.skip_input_grad = skip_input_grad
        fan_in = in_ch * ksize * ksize
        self.w = Param(f"{name}.w",
                       kaiming_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - self.ksize) // self.stride + 1
        ow = (w - self.ksize) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {self.ksize} stride {self.stride}")
        return oh, ow

    def _wmat(self) -> Array:
        k, c, oc = self.ksize, self.in_ch, self.out_ch
        return np.ascontiguousarray(self.w.value.transpose(2, 3, 1, 0)).reshape(k * k * c, oc)

    def forward(self, x: Array) -> Array:
        b, h, w, c = x.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        k, s = self.ksize, self.stride
        oh, ow = self.out_hw(h, w)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        win = win[:, ::s, ::s]  # (b, oh, ow, c, k, k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * oh * ow,
                                                                             k * k * c)
        self._cols = cols
        self._xshape = x.shape
        out = cols @ self._wmat() + self.b.value
        return out.reshape(b, oh, ow, self.out_ch)

    def backward(self, grad: Array) -> Array | None:
        b, oh, ow, _ = grad.shape
        k, s, c = self.ksize, self.stride, self.in_ch
        gmat = np.ascontiguousarray(grad).reshape(b * oh * ow, self.out_ch)
        dw = (self._cols.T @ gmat).reshape(k, k, c, self.out_ch)
        self.w.grad += dw.transpose(3, 2, 0, 1)
        self.b.grad += gmat.sum(axis=0)
        if self.skip_input_grad:
            return None
        dcols = (gmat @ self._wmat().T).reshape(b, oh, ow, k, k, c)
        dx = np.zeros(self._xshape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        return dx


class ResidualBlock(Layer):
    """x -> Linear(ReLU(x)) + x; input width must equal the block width."""

    def __init__(self, name: str, dim: int, *, rng: np.random.Generator, dtype=np.float32):
        self.dim = dim
        self.dense = Dense(name, dim, dim, rng=rng, dtype=dtype)

    def params(self):
        return self.dense.params()

    def forward(self, x: Array) -> Array:
        if x.shape[-1] != self.dim:
            raise ValueError(f"residual block width {self.dim} got input width {x.shape[-1]}")
        self._mask = x > 0
        return self.dense.forward(np.where(self._mask, x, 0)) + x

    def backward(self, grad: Array) -> Array:
        return self.dense.backward(grad) * self._mask + grad


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def params(self):
        out: list[Param] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: Array) -> Array:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: Array) -> Array:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def mlp(name: str, dims: list[int], *, rng: np.random.Generator, dtype=np.float32,
        final: str | None = None) -> Sequential:
    """ReLU MLP through `dims`; `final` may add a 'tanh' output squash."""
    layers: list[Layer] = []
    for i in range(len(dims) - 1):
        layers.append(Dense(f"{name}.fc{i}", dims[i], dims[i + 1], rng=rng, dtype=dtype))
        if i < len(dims) - 2:
            layers.append(ReLU())
    if final == "tanh":
        layers.append(Tanh())
    elif final is not None:
        raise ValueError(f"unknown final activation {final!r}")
    return Sequential(layers)


def rff_embed(sigma, freqs: Array) -> Array:
    """Noise-level embedding: sin/cos(2*pi*f*c) features over frozen frequencies.

    `sigma` is a positive scalar or 1-D batch; c = ln(sigma)/4 is the noise
    transform the denoiser conditions on. Output shape (..., 2*len(freqs)).
    """
    sig = np.asarray(sigma, dtype=freqs.dtype)
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    c = np.log(sig) / 4.0
    phase = 2.0 * np.pi * np.multiply.outer(c, freqs)
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def rff_frequencies(rng: np.random.Generator, dim: int = 16, scale: float = 16.0,
                    dtype=np.float32) -> Array:
    """Draw the frozen RFF frequency vector: N(0,1) scaled by `scale`."""
    return (rng.standard_normal(dim) * scale).astype(dtype)
