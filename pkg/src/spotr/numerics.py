"""Float64 tensors with a reverse-mode tape, op instrumentation and a
finite-difference oracle.

Every op accepts arrays with leading batch dimensions. Cost conventions used
by the op counter (and mirrored by the closed forms in :mod:`spotr.bench`):

* matmul ``(..., M, K) @ (K, N)``: ``2*M*K*N`` per batch item (one
  multiply-add is two FLOPs).
* elementwise primitives (add, sub, mul, div, neg, exp, square, relu,
  sigmoid): one FLOP per output element.
* ``sum`` and ``max`` reductions: one FLOP per input element.
* ``softmax`` / ``log_softmax``: five FLOPs per element (max, shift, exp,
  accumulate, normalize).
* ``layer_norm``: seven FLOPs per element plus one per normalized row.
* data movement (gather, concat, reshape, transpose, broadcast): free.

Activation bytes are the bytes of every array an op allocates; views
(reshape, transpose, broadcast) allocate nothing. Since the tape keeps every
intermediate alive until backward, the tally after a forward pass is the
peak simultaneously-live activation set.
"""

from __future__ import annotations

import builtins
import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


# --------------------------------------------------------------------------
# global op state: grad mode, counters, branch recording, dry (shape-only) runs

_grad_enabled = True
_counter: "OpCounter | None" = None
_branches: "list[bytes] | None" = None


@dataclass
class OpCounter:
    flops: int = 0
    act_bytes: int = 0
    dry: bool = False
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, flops: int, nbytes: int) -> None:
        self.flops += int(flops)
        self.act_bytes += int(nbytes)
        f, b = self.by_op.get(op, (0, 0))
        self.by_op[op] = (f + int(flops), b + int(nbytes))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_ops(dry: bool = False) -> Iterator[OpCounter]:
    """Tally FLOPs and allocated activation bytes of every op run inside.

    With ``dry=True`` ops only propagate shapes; outputs are zero-strided
    placeholders, so arbitrarily large configurations can be counted.
    """
    global _counter
    prev, _counter = _counter, OpCounter(dry=dry)
    try:
        yield _counter
    finally:
        _counter = prev


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch pattern (ReLU signs, max argmaxes) of every op."""
    global _branches
    prev, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = prev


def _dry() -> bool:
    return _counter is not None and _counter.dry


def _placeholder(shape) -> np.ndarray:
    return np.broadcast_to(np.zeros((), DTYPE), tuple(shape))


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def backward(self) -> None:
        backward(self)


def _all_finite(a: np.ndarray) -> bool:
    # min/max propagate NaN and expose +-Inf without a boolean temporary
    if a.size == 0:
        return True
    return bool(np.isfinite(a.min()) and np.isfinite(a.max()))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple, grad_fn: Callable | None,
          flops: int = 0, alloc: bool = True) -> Tensor:
    if _counter is not None:
        _counter.add(op, flops, data.size * 8 if alloc else 0)
    if (not _counter or not _counter.dry) and not _all_finite(data):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    req = _grad_enabled and grad_fn is not None and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = parents if req else ()
    out._backward = grad_fn if req else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def _binary(op, a, b, fwd, grad_a, grad_b):
    a, b = as_tensor(a), as_tensor(b)
    if _dry():
        shape = np.broadcast_shapes(a.shape, b.shape)
        return _node(op, _placeholder(shape), (a, b), None, int(np.prod(shape)))
    data = fwd(a.data, b.data)

    def grad_fn(g):
        return (_unbroadcast(grad_a(g, a.data, b.data, data), a.shape) if a.requires_grad else None,
                _unbroadcast(grad_b(g, a.data, b.data, data), b.shape) if b.requires_grad else None)

    return _node(op, data, (a, b), grad_fn, data.size)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide, lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * o / y)


def _unary(op, x, fwd, grad):
    x = as_tensor(x)
    if _dry():
        return _node(op, _placeholder(x.shape), (x,), None, x.data.size)
    data = fwd(x.data)
    return _node(op, data, (x,), lambda g: (grad(g, x.data, data),), data.size)


def neg(x) -> Tensor:
    return _unary("neg", x, np.negative, lambda g, x, o: -g)


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, x, o: g * o)


def square(x) -> Tensor:
    return _unary("square", x, np.square, lambda g, x, o: 2.0 * g * x)


def sigmoid(x) -> Tensor:
    def fwd(v):
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    return _unary("sigmoid", x, fwd, lambda g, x, o: g * o * (1.0 - o))


def relu(x) -> Tensor:
    x = as_tensor(x)
    if _dry():
        return _node("relu", _placeholder(x.shape), (x,), None, x.data.size)
    data = np.maximum(x.data, 0.0)
    if _branches is not None:
        _branches.append(np.packbits(x.data > 0).tobytes())
    if not (_grad_enabled and x.requires_grad):
        return _node("relu", data, (x,), None, data.size)
    mask = x.data > 0
    return _node("relu", data, (x,), lambda g: (g * mask,), data.size)


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    flops = 2 * int(np.prod(lead)) * m * k * n
    shape = lead + (m, n)
    if _dry():
        return _node("matmul", _placeholder(shape), (a, b), None, flops)
    if b.ndim == 2:
        # weight-style right operand: fold the leading axes into one GEMM
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(shape)

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node("matmul", data, (a, b), grad_fn, flops)

    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node("matmul", data, (a, b), grad_fn, flops)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    if not keepdims:
        shape = tuple(n for i, n in enumerate(x.shape) if i not in axes)
    if _dry():
        return _node("sum", _placeholder(shape), (x,), None, x.data.size)
    data = np.sum(x.data, axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kshape), x.shape).copy(),)

    return _node("sum", np.asarray(data), (x,), grad_fn, x.data.size)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return div(sum(x, axis=axes, keepdims=keepdims), float(n))


def max(x, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction along one axis; the gradient flows to the first argmax."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if _dry():
        shape = list(x.shape)
        if keepdims:
            shape[axis] = 1
        else:
            del shape[axis]
        return _node("max", _placeholder(shape), (x,), None, x.data.size)
    idx = np.argmax(x.data, axis=axis)
    if _branches is not None:
        _branches.append(idx.tobytes())
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        data = np.squeeze(data, axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis)
        return (gx,)

    return _node("max", data, (x,), grad_fn, x.data.size)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax. Entries where ``mask`` is False get weight 0 and
    are excluded from the normalizer; every slice must keep one entry."""
    x = as_tensor(x)
    if _dry():
        return _node("softmax", _placeholder(x.shape), (x,), None, 5 * x.data.size)
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, v.shape)
        v = np.where(mask, v, -np.inf)
    m = np.max(v, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax over an empty (fully masked) slice")
    e = np.exp(v - m)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        return (data * (g - np.sum(g * data, axis=axis, keepdims=True)),)

    return _node("softmax", data, (x,), grad_fn, 5 * x.data.size)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if _dry():
        return _node("log_softmax", _placeholder(x.shape), (x,), None, 5 * x.data.size)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    data = shifted - lse

    def grad_fn(g):
        p = np.exp(data)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _node("log_softmax", data, (x,), grad_fn, 5 * x.data.size)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    rows = x.data.size // x.shape[-1]
    flops = 7 * x.data.size + rows
    if _dry():
        return _node("layer_norm", _placeholder(x.shape), (x, gain, bias), None, flops)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _node("layer_norm", data, (x, gain, bias), grad_fn, flops)


# --------------------------------------------------------------------------
# shape and indexing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _node("reshape", data, (x,), lambda g: (g.reshape(x.shape),), alloc=False)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    data = np.swapaxes(x.data, -1, -2)
    return _node("transpose", data, (x,), lambda g: (np.swapaxes(g, -1, -2),), alloc=False)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape)
    return _node("broadcast", data, (x,), lambda g: (_unbroadcast(g, x.shape),), alloc=False)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    if _dry():
        shape = list(xs[0].shape)
        shape[axis] = builtins.sum(sizes)
        return _node("concat", _placeholder(shape), tuple(xs), None)
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if x.requires_grad else None
            for i, x in enumerate(xs))

    return _node("concat", data, tuple(xs), grad_fn)


def gather(x, idx) -> Tensor:
    """Select rows along axis -2 per batch item.

    ``x`` has shape ``(*B, N, C)`` and ``idx`` integer shape ``(*B, *R)``;
    the result has shape ``(*B, *R, C)``. With no batch axes this is
    ``x[idx]``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    lead = x.shape[:-2]
    n, c = x.shape[-2], x.shape[-1]
    if idx.shape[:len(lead)] != lead:
        raise ValueError(f"gather batch mismatch: {x.shape} vs index {idx.shape}")
    b = int(np.prod(lead))
    rest = idx.shape[len(lead):]
    flat = (idx.reshape(b, -1) + (np.arange(b) * n)[:, None]).reshape(-1)
    shape = lead + rest + (c,)
    if _dry():
        return _node("gather", _placeholder(shape), (x,), None)
    data = x.data.reshape(b * n, c)[flat].reshape(shape)

    def grad_fn(g):
        gx = np.zeros((b * n, c))
        np.add.at(gx, flat, g.reshape(-1, c))
        return (gx.reshape(x.shape),)

    return _node("gather", data, (x,), grad_fn)



# --------------------------------------------------------------------------
# backward and gradient oracle


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` (accumulating) on every leaf reachable from ``loss``.

    The tape is released afterwards; a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rerun the forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


def fd_gradient(f: Callable[[Tensor], float], theta: Tensor, h: float = 1e-5,
                index: Sequence[int] | None = None) -> np.ndarray:
    """Central differences ``(f(θ+h) - f(θ-h)) / 2h`` per coordinate of θ.

    ``f(theta)`` is evaluated with ``theta.data`` perturbed in place. ``index``
    restricts the estimate to the listed flat coordinates (others are 0).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = theta.data.reshape(-1)
    out = np.zeros(flat.size)
    coords = range(flat.size) if index is None else index
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(theta))
        flat[i] = old - h
        fm = float(f(theta))
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(theta.shape)
