"""A small tape-based reverse-mode differentiation engine on numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` replays them in reverse.  Outside a tape, operations run
eagerly with no bookkeeping, which is what evaluation uses.

Tensors hold float32 data by default.  Matrix products accumulate in float64
and round once, which keeps each output row independent of how many other
rows are in the batch.  ``with precision(np.float64):`` switches newly created
tensors to float64, which gradient checks rely on.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import InputDomainError, ShapeError

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the primitive operations executed inside ``with Tape():``."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_tape():
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _emit(op: str, data, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    track = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        _TAPES[-1].nodes.append(Node(op, inputs, out, backward_fn))
    return out


def _cast(x):
    return x.astype(default_dtype(), copy=False)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Element-wise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


elementwise_mul = mul


def matmul(x, w) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., k) and ``w`` of shape (k, m)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    x64 = x.data.astype(np.float64)
    w64 = w.data.astype(np.float64)
    out = _cast(x64 @ w64)

    def backward(g):
        g64 = g.astype(np.float64)
        gx = _cast(g64 @ w64.T) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = _cast(x64.reshape(-1, x.shape[-1]).T @ g64.reshape(-1, w.shape[1]))
        return gx, gw

    return _emit("matmul", out, (x, w), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _emit("concat", out, tuple(tensors), backward)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def slice_last_dim(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[-1]:
        raise ShapeError(f"slice_last_dim: [{start}:{stop}] outside last dimension {x.shape[-1]}")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_last_dim", x.data[..., start:stop], (x,), backward)


def split_last_dim(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    x = as_tensor(x)
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split_last_dim: sizes {list(sizes)} do not sum to {x.shape[-1]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_last_dim(x, start, start + n))
        start += n
    return out


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(v):
    return (0.5 * (1 + np.tanh(0.5 * v))).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("silu", x.data * s, (x,), lambda g: (g * (s * (1 + x.data * (1 - s))),))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last dimension, then apply a learned scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: scale {scale.shape} / shift {shift.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = centered * inv
    out = xhat * scale.data + shift.data

    def backward(g):
        gx_hat = g * scale.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _emit("layer_norm", out, (x, scale, shift), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-p)``; identity when not training."""
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise InputDomainError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / np.asarray(1 - p, dtype=x.data.dtype)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _emit("embedding_lookup", table.data[ids], (table,), backward)


gather_rows = embedding_lookup


def where(mask, a, b) -> Tensor:
    """``a`` where ``mask`` is true, else ``b``; ``mask`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _emit(
        "where",
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)),
    )


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.data.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _emit("reduce_sum", out, (x,), backward)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis), 1.0 / float(count))


def cosine_similarity(x: Tensor, y: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """``x.y / (|x| |y| + eps)`` along the last dimension."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"cosine_similarity: shapes {x.shape} and {y.shape} differ")
    dot = (x.data * y.data).sum(axis=-1)
    nx = np.sqrt((x.data * x.data).sum(axis=-1))
    ny = np.sqrt((y.data * y.data).sum(axis=-1))
    den = nx * ny + eps
    out = (dot / den).astype(x.data.dtype)

    def backward(g):
        g = g[..., None]
        dd, nx_, ny_, den_ = dot[..., None], nx[..., None], ny[..., None], den[..., None]
        safe_nx = np.where(nx_ > 0, nx_, 1)
        safe_ny = np.where(ny_ > 0, ny_, 1)
        # d(den)/dx = |y| x / |x|
        gx = y.data / den_ - dd / den_**2 * ny_ * x.data / safe_nx
        gy = x.data / den_ - dd / den_**2 * nx_ * y.data / safe_ny
        return g * gx, g * gy

    return _emit("cosine_similarity", out, (x, y), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy: label outside class range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    nll = logsum - z[rows, labels]
    n = max(labels.shape[0], 1)
    out = np.asarray(nll.sum() / n, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1
        return (_cast(p * (np.float64(g) / n)),)

    return _emit("softmax_cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------------------
# Differentiation


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every leaf (or the tensors in ``wrt``)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.backward_fn(g)
        for t, gt in zip(node.inputs, parts):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = gt
                keep[key] = t
    if wrt is None:
        return {keep[k]: v for k, v in grads.items()}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` maps the ``inputs`` to a scalar tensor.  Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        loss = f(*inputs)
    analytic = backward(tape, loss, inputs)
    worst = 0.0
    with no_tape():
        for t in inputs:
            flat = t.data.reshape(-1)
            grad = analytic[t].reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(f(*inputs).data)
                flat[k] = orig - eps
                down = float(f(*inputs).data)
                flat[k] = orig
                num = (up - down) / (2 * eps)
                a = float(grad[k])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
