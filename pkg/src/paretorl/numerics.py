"""Dense tensors, a define-by-run tape, reverse-mode gradients and AdamW.

Operations record themselves on the innermost active :class:`Tape`.  Outside
a ``with Tape():`` block nothing is recorded, which is how inference runs.

    >>> store = ParameterStore({"w": np.ones(3)})
    >>> with Tape() as tape:
    ...     loss = sum_(multiply(store["w"], 2.0))
    >>> backward(tape, loss)
    >>> store["w"].grad
    array([2., 2., 2.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._kernels import adamw_update, scatter_rows

_local = threading.local()

PAD_NEG = -1e9


class ShapeError(ValueError):
    """An operation received operands whose shapes do not conform."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient component is NaN or infinite."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite gradient {value!r} at parameter index {index}")
        self.index = index
        self.value = value


# ---------------------------------------------------------------------------
# dtype handling
# ---------------------------------------------------------------------------


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new constants and parameters."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


# ---------------------------------------------------------------------------
# Tensor and Tape
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, grad=None, _leaf=True):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        elif isinstance(data, np.floating):
            self.data = np.asarray(data)  # keep the precision of 0-d reductions
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.is_leaf = _leaf
        if requires_grad and _leaf:
            if grad is None:
                grad = np.zeros_like(self.data)
            elif grad.shape != self.data.shape:
                raise ShapeError(f"grad shape {grad.shape} != data shape {self.data.shape}")
            self.grad = grad
        else:
            self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: multiply(a, b)
    __rmul__ = lambda a, b: multiply(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: multiply(a, -1.0)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of the operations executed while it is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


def _active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    stack = getattr(_local, "tapes", None)
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = stack


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _emit(out_data, inputs, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(out_data, requires_grad=tape is not None, _leaf=False)
    if tape is not None:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every grad-requiring leaf, then clear the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.clear()
        return
    if loss.is_leaf:
        loss.grad += 1.0
        tape.clear()
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                np.add(t.grad, gi, out=t.grad, casting="unsafe")
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("add", a, b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("sub", a, b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("multiply", a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _emit(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _emit(y, (x,), lambda g: (g * 0.5 / y,))


def softplus(x) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    x = as_tensor(x)
    y = np.logaddexp(0, x.data).astype(x.data.dtype)
    sig = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return _emit(y, (x,), lambda g: (g * sig,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def squared_error(pred, target) -> Tensor:
    """Elementwise (pred - target)^2."""
    pred, target = _pair(pred, target)
    _bshape("squared_error", pred, target)
    d = pred.data - target.data
    return _emit(d * d, (pred, target),
                 lambda g: (_unbroadcast(2 * g * d, pred.shape), _unbroadcast(-2 * g * d, target.shape)))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    try:
        # (..., k) @ (k, m) as one 2-D product is much faster than a batched one
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[1:]) if flat \
            else np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def index(x, key) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit(x.data[key], (x,), bw)


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.data)
        scatter_rows(gt, idx, g)
        return (gt,)

    return _emit(table.data[idx], (table,), bw)


def take_last(x, idx) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"take_last: index shape {idx.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions (accumulate in float64)
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _emit(out, (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.data.dtype),)

    return _emit(out, (x,), bw)


# ---------------------------------------------------------------------------
# row-wise normalisations
# ---------------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (x,), bw)


def cross_entropy_from_logits(logits, target) -> Tensor:
    """Per-row -log softmax(logits)[target]; shape is ``logits.shape[:-1]``."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_from_logits: target {target.shape} vs logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = -np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None],
                          np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)

    return _emit(out, (logits,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    dt = x.data.dtype
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(np.square(centered).mean(axis=-1, keepdims=True) + dt.type(eps))
    xhat = centered * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(dt), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gain, bias), bw)


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by name to one of the recorded operations."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


OPS = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "tanh": tanh,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "log": log,
    "gather_rows": gather_rows,
    "layer_norm": layer_norm,
    "mean": mean,
    "sum": sum_,
    "squared_error": squared_error,
    "cross_entropy_from_logits": cross_entropy_from_logits,
}


# ---------------------------------------------------------------------------
# parameters and optimiser
# ---------------------------------------------------------------------------


class ParameterStore:
    """All trainable reals of one model in a single flat buffer.

    Each named parameter is a :class:`Tensor` whose ``data`` and ``grad`` are
    views into ``flat`` and ``grad``, so the optimiser works on whole buffers.
    """

    def __init__(self, arrays: dict, dtype=None, requires_grad=True):
        dtype = np.dtype(dtype or default_dtype())
        self.names = list(arrays)
        self.shapes = {k: tuple(np.shape(v)) for k, v in arrays.items()}
        total = int(sum(int(np.prod(s)) for s in self.shapes.values()))
        self.flat = np.zeros(total, dtype=dtype)
        self.grad = np.zeros(total, dtype=dtype)
        self.requires_grad = requires_grad
        self._tensors = {}
        self._offsets = {}
        off = 0
        for name in self.names:
            shape = self.shapes[name]
            n = int(np.prod(shape))
            view = self.flat[off:off + n].reshape(shape)
            view[...] = arrays[name]
            self._offsets[name] = (off, n)
            if requires_grad:
                gview = self.grad[off:off + n].reshape(shape)
                self._tensors[name] = Tensor(view, requires_grad=True, grad=gview)
            else:
                self._tensors[name] = Tensor(view)
            off += n

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return self.flat.size

    def arrays(self) -> dict:
        return {k: self._tensors[k].data.copy() for k in self.names}

    def offset(self, name):
        return self._offsets[name]

    def zero_grad(self):
        self.grad[...] = 0

    def scale_vector(self, multipliers: dict) -> np.ndarray:
        """Per-element float32 vector: ``multipliers[name]`` over that parameter, 1 elsewhere."""
        out = np.ones(self.flat.size, dtype=np.float32)
        for name, mult in multipliers.items():
            off, n = self._offsets[name]
            out[off:off + n] = mult
        return out

    def copy(self, dtype=None, requires_grad=None) -> "ParameterStore":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return ParameterStore(self.arrays(), dtype=dtype or self.flat.dtype, requires_grad=rg)

    def load_flat(self, flat):
        if flat.shape != self.flat.shape:
            raise ShapeError(f"load_flat: expected {self.flat.shape}, got {flat.shape}")
        self.flat[...] = flat


@dataclass
class AdamWState:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = 1.0
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    lr_scale: np.ndarray | None = field(default=None, repr=False)  # per-element multiplier

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size, dtype=np.float32)
        if self.v is None:
            self.v = np.zeros(self.size, dtype=np.float32)
        if self.m.shape != (self.size,) or self.v.shape != (self.size,):
            raise ShapeError("AdamW moments must match the parameter store length")
        if self.lr_scale is not None and self.lr_scale.shape != (self.size,):
            raise ShapeError("lr_scale must match the parameter store length")

    @classmethod
    def for_store(cls, store: ParameterStore, **hyper) -> "AdamWState":
        return cls(size=len(store), **hyper)

    def copy(self) -> "AdamWState":
        return AdamWState(self.size, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                          self.max_grad_norm, self.step, self.m.copy(), self.v.copy(),
                          None if self.lr_scale is None else self.lr_scale.copy())


def global_grad_norm(grad: np.ndarray) -> float:
    return math.sqrt(float(np.dot(grad.astype(np.float64), grad.astype(np.float64))))


def adamw_step(params: ParameterStore, state: AdamWState, grads: np.ndarray | None = None) -> None:
    """One decoupled-weight-decay Adam update; clears the gradients afterwards.

    Raises NonFiniteGradientError, before touching anything, if a gradient
    component is NaN or infinite.
    """
    g = params.grad if grads is None else grads
    if len(params) != state.size:
        raise ShapeError(f"adamw_step: store has {len(params)} params, state has {state.size}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]), float(g[bad[0]]))
    if state.max_grad_norm is not None:
        norm = global_grad_norm(g)
        if norm > state.max_grad_norm:
            g = g.astype(np.float64) * (state.max_grad_norm / norm)

    state.step += 1
    adamw_update(params.flat, g, state.m, state.v, state.lr, state.beta1, state.beta2, state.eps,
                 state.weight_decay, state.step, state.lr_scale)
    params.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(model_fn: Callable[[], Tensor], params: ParameterStore, eps: float = 1e-5,
               indices=None) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``model_fn`` must rebuild the scalar loss from ``params`` on every call.
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    params.zero_grad()
    with Tape() as tape:
        loss = model_fn()
    backward(tape, loss)
    analytic = params.grad.astype(np.float64).copy()
    params.zero_grad()

    idx = range(len(params)) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = params.flat[i]
        params.flat[i] = orig + eps
        up = float(model_fn().data.sum())
        params.flat[i] = orig - eps
        down = float(model_fn().data.sum())
        params.flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
