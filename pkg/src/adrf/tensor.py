"""Dense float64 tensors with a recorded tape and reverse-mode differentiation.

Operations record a node on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. Outside a tape nothing is recorded, which
is what inference uses.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mse(w @ Tensor([[3.0]]), Tensor([[0.0]]))
    >>> grads = tape.backward(loss)
    >>> float(w.grad[0, 0])
    36.0
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from adrf import kernels


class ShapeError(ValueError):
    """Operands have incompatible shapes or invalid attributes."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op, inputs, outputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations for one training step."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def _record(op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn):
    if _ACTIVE and any(t.requires_grad for t in inputs):
        _ACTIVE[-1].nodes.append(Node(op, tuple(inputs), tuple(outputs), backward_fn))


def _out(arr: np.ndarray, inputs: Sequence[Tensor], op: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")
    t = Tensor.__new__(Tensor)
    t.data = np.ascontiguousarray(arr, dtype=np.float64)
    t.requires_grad = any(x.requires_grad for x in inputs)
    t.grad = None
    t.name = None
    return t


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) back through ``tape``.

    Sets ``.grad`` on every requires-grad leaf seen on the tape (zeros when the
    leaf does not influence ``loss``) and returns ``{leaf: grad}``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(o) for n in tape.nodes for o in n.outputs}
    if id(loss) not in produced:
        raise ValueError("loss was not computed on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        outs = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in outs):
            continue
        outs = [np.zeros_like(o.data) if g is None else g for g, o in zip(outs, node.outputs)]
        in_grads = node.backward_fn(*outs) if len(outs) > 1 else node.backward_fn(outs[0])
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    result = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and t not in result:
                g = grads.get(id(t))
                t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
                result[t] = t.grad
    return result


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _out(a.data + b.data, (a, b), "add")
    _record("add", (a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = _out(a.data - b.data, (a, b), "sub")
    _record("sub", (a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _out(a.data * b.data, (a, b), "mul")
    _record(
        "mul",
        (a, b),
        (out,),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _out(y, (x,), "tanh")
    _record("tanh", (x,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    out = _out(y, (x,), "sigmoid")
    _record("sigmoid", (x,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    out = _out(np.where(pos, x.data, slope * x.data), (x,), "leaky_relu")
    _record("leaky_relu", (x,), (out,), lambda g: (np.where(pos, g, slope * g),))
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _out(a.data @ b.data, (a, b), "matmul")
    _record("matmul", (a, b), (out,), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    out = _out(x.data.reshape(shape), (x,), "reshape")
    _record("reshape", (x,), (out,), lambda g: (g.reshape(old),))
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        arr = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = _out(arr, tensors, "concat")
    _record("concat", tensors, (out,), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError("stack: all tensors must share a shape")
    out = _out(np.stack([t.data for t in tensors], axis=axis), tensors, "stack")
    n = len(tensors)
    _record(
        "stack",
        tensors,
        (out,),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )
    return out


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Pick one slice along ``axis`` (e.g. a single timestep)."""
    out = _out(np.take(x.data, index, axis=axis), (x,), "select")

    def bwd(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    _record("select", (x,), (out,), bwd)
    return out


def repeat_vector(x: Tensor, n: int) -> Tensor:
    """(B, F) -> (B, n, F) with identical rows."""
    if x.data.ndim != 2 or n < 1:
        raise ShapeError(f"repeat_vector expects (B, F) and n >= 1, got {x.shape}, n={n}")
    out = _out(np.repeat(x.data[:, None, :], n, axis=1), (x,), "repeat_vector")
    _record("repeat_vector", (x,), (out,), lambda g: (g.sum(axis=1),))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum()), (x,), "sum")
    _record("sum", (x,), (out,), lambda g: (np.full_like(x.data, g.item()),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = _out(np.asarray(x.data.mean()), (x,), "mean")
    _record("mean", (x,), (out,), lambda g: (np.full_like(x.data, g.item() / n),))
    return out


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution; ``w`` is (C_out, C_in, k, k)."""
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: expected NCHW input and square kernels, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, k, _ = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv2d: bias must be ({Co},), got {b.shape}")
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {H}x{W} with pad {pad}")
    cols = kernels.im2col(x.data, k, stride, pad)
    wm = w.data.reshape(Co, -1)
    y = np.matmul(wm, cols)
    if b is not None:
        y += b.data[None, :, None]
    out = _out(y.reshape(B, Co, Ho, Wo), (x, w) if b is None else (x, w, b), "conv2d")

    def bwd(g):
        gm = g.reshape(B, Co, Ho * Wo)
        dw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm)
            dx = kernels.col2im(np.ascontiguousarray(dcols), C, H, W, k, stride, pad)
        if b is None:
            return dx, dw
        return dx, dw, gm.sum(axis=(0, 2)) if b.requires_grad else None

    _record("conv2d", (x, w) if b is None else (x, w, b), (out,), bwd)
    return out


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    if factor < 1 or x.data.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input and factor >= 1, got {x.shape}, {factor}")
    B, C, H, W = x.shape
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    out = _out(y, (x,), "upsample")
    _record(
        "upsample",
        (x,),
        (out,),
        lambda g: (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),),
    )
    return out


# ---------------------------------------------------------------- recurrent


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor):
    """One fused LSTM step. ``w`` is (4H, in), ``u`` is (4H, H), gate order i, f, o, g.

    Returns ``(h_t, c_t)``; both are recorded as outputs of a single tape node.
    """
    Hd = u.shape[1]
    if w.shape[0] != 4 * Hd or u.shape[0] != 4 * Hd or b.shape != (4 * Hd,):
        raise ShapeError(f"lstm_cell: inconsistent parameter shapes {w.shape}, {u.shape}, {b.shape}")
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"lstm_cell: input must be (B, {w.shape[1]}), got {x.shape}")
    if h.shape != (x.shape[0], Hd) or c.shape != (x.shape[0], Hd):
        raise ShapeError(f"lstm_cell: state must be (B, {Hd}), got {h.shape} and {c.shape}")
    z = x.data @ w.data.T + h.data @ u.data.T + b.data
    h_new, c_new, act, tc = kernels.lstm_gates_forward(np.ascontiguousarray(z), c.data)
    inputs = (x, h, c, w, u, b)
    h_out = _out(h_new, inputs, "lstm_cell")
    c_out = _out(c_new, inputs, "lstm_cell")

    def bwd(gh, gc):
        dz, dc_prev = kernels.lstm_gates_backward(
            np.ascontiguousarray(gh), np.ascontiguousarray(gc), act, tc, c.data
        )
        return (
            dz @ w.data if x.requires_grad else None,
            dz @ u.data,
            dc_prev,
            dz.T @ x.data if w.requires_grad else None,
            dz.T @ h.data if u.requires_grad else None,
            dz.sum(axis=0) if b.requires_grad else None,
        )

    _record("lstm_cell", inputs, (h_out, c_out), bwd)
    return h_out, c_out


# ---------------------------------------------------------------- losses


def _same_shape(p: Tensor, t: Tensor, kind: str):
    if p.shape != t.shape:
        raise ShapeError(f"{kind}: prediction {p.shape} and target {t.shape} differ")


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _same_shape(pred, target, "mse")
    d = pred.data - target.data
    n = d.size
    out = _out(np.asarray(np.mean(d * d)), (pred, target), "mse")
    _record("mse", (pred, target), (out,), lambda g: (2.0 * g.item() * d / n, -2.0 * g.item() * d / n))
    return out


def mae(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _same_shape(pred, target, "mae")
    d = pred.data - target.data
    n = d.size
    s = np.sign(d)
    out = _out(np.asarray(np.mean(np.abs(d))), (pred, target), "mae")
    _record("mae", (pred, target), (out,), lambda g: (g.item() * s / n, -g.item() * s / n))
    return out


def bce(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; ``prob`` must lie strictly inside (0, 1)."""
    target = as_tensor(target)
    _same_shape(prob, target, "bce")
    p = prob.data
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("bce: probabilities must lie strictly inside (0, 1)")
    y = target.data
    n = p.size
    val = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = _out(np.asarray(val), (prob, target), "bce")
    _record(
        "bce",
        (prob, target),
        (out,),
        lambda g: (g.item() * (p - y) / (p * (1.0 - p)) / n, -g.item() * (np.log(p) - np.log1p(-p)) / n),
    )
    return out


LOSSES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "mse": mse,
    "mae": mae,
    "mse+mae": lambda p, t: add(mse(p, t), mae(p, t)),
    "bce": bce,
}


def loss(kind: str, prediction: Tensor, target) -> Tensor:
    try:
        fn = LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}") from None
    return fn(prediction, target)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Binary cross-entropy taking pre-sigmoid scores; stable for saturated logits."""
    target = as_tensor(target)
    _same_shape(logits, target, "bce")
    z, y = logits.data, target.data
    n = z.size
    val = np.mean(np.logaddexp(0.0, z) - y * z)
    out = _out(np.asarray(val), (logits, target), "bce")
    p = _sigmoid(z)
    _record("bce_logits", (logits, target), (out,), lambda g: (g.item() * (p - y) / n, -g.item() * z / n))
    return out
