"""Layers and the parameter registry shared by every model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from adrf import tensor as T
from adrf.tensor import ShapeError, Tensor

ACTIVATIONS = {
    None: lambda x: x,
    "linear": lambda x: x,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "leaky_relu": lambda x: T.leaky_relu(x, 0.2),
}


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = glorot_bound(fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Module:
    """Container whose Tensor attributes are its parameters.

    Parameters are discovered in attribute-definition order, recursing into
    sub-modules and lists of sub-modules, so names are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _param(arr, name) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple
    out_shape: tuple
    activation: str | None = None
    kernel: int = 0
    stride: int = 1


def validate_chain(specs: Sequence[LayerSpec]) -> None:
    """Raise ShapeError unless each layer's output feeds the next layer's input."""
    for prev, nxt in zip(specs, specs[1:]):
        if tuple(prev.out_shape) != tuple(nxt.in_shape):
            raise ShapeError(
                f"{prev.kind} produces {prev.out_shape} but {nxt.kind} expects {nxt.in_shape}"
            )


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str | None = None, seed=None):
        rng = as_rng(seed)
        self.weight = _param(glorot_uniform(rng, (n_in, n_out), n_in, n_out), "weight")
        self.bias = _param(np.zeros(n_out), "bias")
        self.activation = activation
        self.spec = LayerSpec("dense", (n_in,), (n_out,), activation)

    def __call__(self, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.activation](T.matmul(x, self.weight) + self.bias)


class TimeDistributedDense(Dense):
    """Same dense map applied to every timestep of a (B, T, F) sequence."""

    def __call__(self, x: Tensor) -> Tensor:
        B, steps, F = x.shape
        y = super().__call__(T.reshape(x, (B * steps, F)))
        return T.reshape(y, (B, steps, -1))


class LSTMCell(Module):
    """Standard LSTM cell (no peepholes). Gate blocks in W, U, b: i, f, o, g."""

    def __init__(self, n_in: int, hidden: int, seed=None):
        rng = as_rng(seed)
        H = hidden
        self.n_in, self.hidden = n_in, hidden
        w = np.concatenate([glorot_uniform(rng, (H, n_in), n_in, H) for _ in range(4)])
        u = np.concatenate([glorot_uniform(rng, (H, H), H, H) for _ in range(4)])
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        self.W = _param(w, "W")
        self.U = _param(u, "U")
        self.b = _param(b, "b")

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros((batch, self.hidden))), Tensor(np.zeros((batch, self.hidden)))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"LSTM cell expects input size {self.n_in}, got {x.shape}")
        return T.lstm_cell(x, h, c, self.W, self.U, self.b)


class LSTM(Module):
    """Unrolled LSTM layer over a (B, T, F) sequence.

    Returns ``(output, (h_T, c_T))`` where output is (B, T, H) when
    ``return_sequences`` else (B, H).
    """

    def __init__(self, n_in: int, hidden: int, return_sequences: bool = True, seed=None):
        self.cell = LSTMCell(n_in, hidden, seed=seed)
        self.return_sequences = return_sequences
        self.hidden = hidden

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor] | None = None):
        if x.data.ndim != 3:
            raise ShapeError(f"LSTM expects (B, T, F), got {x.shape}")
        B, steps, _ = x.shape
        h, c = state if state is not None else self.cell.zero_state(B)
        outs = []
        for t in range(steps):
            h, c = self.cell(T.select(x, t, axis=1), h, c)
            outs.append(h)
        if self.return_sequences:
            return T.stack(outs, axis=1), (h, c)
        return h, (h, c)


class Conv2D(Module):
    """3x3 (by default) convolution with padding that keeps ``ceil(in / stride)``."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 activation: str | None = "leaky_relu", seed=None):
        rng = as_rng(seed)
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        self.weight = _param(glorot_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, fan_out), "weight")
        self.bias = _param(np.zeros(c_out), "bias")
        self.stride, self.pad, self.kernel = stride, kernel // 2, kernel
        self.activation = activation
        self.c_in, self.c_out = c_in, c_out

    def out_size(self, size: int) -> int:
        return T.conv_output_size(size, self.kernel, self.stride, self.pad)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
        return ACTIVATIONS[self.activation](y)
