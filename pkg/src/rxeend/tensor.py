"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Values live in row-major numpy arrays.  Operations executed while a
:class:`Tape` is active are recorded together with a backward rule; outside
a tape they run as plain numpy and carry no graph.  Only two broadcasts are
supported: a vector bias added to every row, and a 2-D weight shared by every
matrix of a batched left operand.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

SIGMOID_EPS = 1e-7

_ACTIVE: list["Tape"] = []
_DTYPE = [np.float32]


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside is appended in
    execution order, which is already a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, inputs, output, backward):
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor):
        if self._consumed:
            raise ContractError("backward() already ran on this tape; record a new one")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g if t.grad is None else t.grad + g
        if loss.requires_grad and id(loss) in grads:
            loss.grad = grads.pop(id(loss))
        self._consumed = True
        self.nodes = []


def backward(loss: Tensor, tape: Tape):
    tape.backward(loss)


def _out(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out.requires_grad = live
    if live:
        _ACTIVE[-1].record(list(inputs), out, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared by every
    batch entry) or has the same batch axes as ``a``.
    """
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ between {A.shape} and {B.shape}")

    def bwd(g):
        # skip the product for an input that takes no gradient (e.g. the features)
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _out(A @ B, (a, b), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _out(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _out(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-D vector to every row of ``x`` (last axis D)."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return _out(x.data + bias.data, (x, bias),
                lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))


def scale(x: Tensor, c: float) -> Tensor:
    return _out(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (dropout masks)."""
    return _out(x.data * mask, (x,), lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _out(np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


def _logistic(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor, eps: float = SIGMOID_EPS) -> Tensor:
    """Logistic function clamped to [eps, 1 - eps]; no gradient where clamped."""
    s = _logistic(x.data)
    y = np.clip(s, eps, 1.0 - eps)
    inside = (s > eps) & (s < 1.0 - eps)
    return _out(y, (x,), lambda g: (g * s * (1.0 - s) * inside,))


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _out(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    X = x.data
    d = X.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs rows of {X.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def bwd(g):
        g2 = g.reshape(-1, d)
        gg = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gb = g2.sum(axis=0)
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _out(xhat * G + bias.data, (x, gain, bias), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat_cols: leading shapes {lead} and {p.shape[:-1]} differ")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _out(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _out(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _out(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                lambda g: (np.broadcast_to(g / n, shape).copy(),))


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    return _out(np.asarray(sum(t.data for t in terms), dtype=terms[0].data.dtype),
                tuple(terms), lambda g: tuple(g for _ in terms))


# ---------------------------------------------------------------- losses


def bce(p: Tensor, y: np.ndarray, weight=1.0, eps: float = SIGMOID_EPS) -> Tensor:
    """Weighted sum of binary cross-entropies of clamped probabilities ``p`` against ``y``."""
    if p.shape != np.shape(y):
        raise DimensionError(f"bce: posteriors {p.shape} vs labels {np.shape(y)}")
    P = np.clip(p.data, eps, 1.0 - eps)
    Y = np.asarray(y, dtype=P.dtype)
    w = np.asarray(weight, dtype=P.dtype)
    val = -(w * (Y * np.log(P) + (1.0 - Y) * np.log1p(-P))).sum()

    def bwd(g):
        return (g * w * (-(Y / P) + (1.0 - Y) / (1.0 - P)),)

    return _out(np.asarray(val, dtype=P.dtype), (p,), bwd)


def sigmoid_bce(logits: Tensor, y: np.ndarray, weight=1.0, eps: float = SIGMOID_EPS) -> Tensor:
    """``bce(sigmoid(logits), y)`` fused.

    The value uses the clamped posterior; the gradient is ``sigmoid - y``,
    which coincides with the composed gradient wherever the clamp is inactive
    and keeps saturated wrong logits trainable.
    """
    if logits.shape != np.shape(y):
        raise DimensionError(f"sigmoid_bce: logits {logits.shape} vs labels {np.shape(y)}")
    s = _logistic(logits.data)
    P = np.clip(s, eps, 1.0 - eps)
    Y = np.asarray(y, dtype=P.dtype)
    w = np.asarray(weight, dtype=P.dtype)
    val = -(w * (Y * np.log(P) + (1.0 - Y) * np.log1p(-P))).sum()
    return _out(np.asarray(val, dtype=P.dtype), (logits,), lambda g: (g * w * (s - Y),))


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Run under ``precision(np.float64)``; single precision makes the
    differences meaningless.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires a float64 input tensor")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))


# Every differentiable operation the engine provides; the test suites check
# that each one has a finite-difference gradient case.
DIFFERENTIABLE_OPS = (
    "matmul", "transpose", "swap_last", "reshape", "add", "add_bias", "scale", "mul_const",
    "relu", "sigmoid", "softmax_rows", "layer_norm", "concat_cols", "sum_all", "mean",
    "add_scalars", "bce", "sigmoid_bce",
)
