"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and which touch at least
one tensor with ``requires_grad``, append a record (output, parents, backward
rule) to the tape. :meth:`Tape.backward` replays the records in reverse order
and accumulates gradients into leaf tensors (the parameters).

Weights follow the row-vector convention used throughout the package:
a linear map is ``x @ W + b`` with ``W`` of shape ``(in, out)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError, StateError

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; a tape is bound to the thread that entered it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable) -> None:
        self._records.append((out, parents, backward))

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``, then clear."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf and loss.requires_grad:
            loss._accumulate(pending[id(loss)])
        touched: list[Tensor] = []
        for out, parents, rule in reversed(self._records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent._accumulate(pg)
                    touched.append(parent)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
        for leaf in touched:
            if not np.isfinite(leaf.grad).all():
                raise NumericError(f"non-finite gradient for tensor {leaf.name or '<unnamed>'}")
        self.clear()


class Tensor:
    """A float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor created from non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable) -> "Tensor":
        if not np.isfinite(data).all():
            raise NumericError("operation produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        tape = active_tape()
        tracked = tape is not None and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out.is_leaf = not tracked
        if tracked:
            tape.record(out, parents, backward)
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2:
        raise DimensionError(f"matmul expects (..., k) @ (k, n), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    nd = parts[0].ndim
    ax = axis % nd if nd else 0
    for p in parts:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise DimensionError(f"concat shape mismatch: {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, src),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing (no fancy indexing; use :func:`take_rows` for gathers)."""
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return Tensor._result(np.array(a.data[index]), (a,), backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]`` along axis 0; ``index`` may be any int array."""
    index = np.asarray(index, dtype=np.int64)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + src[1:]))
        return (full,)

    return Tensor._result(a.data[index], (a,), backward)


def put_rows(base: Tensor, index: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[index] = rows``; ``index`` must be unique."""
    index = np.asarray(index, dtype=np.int64)
    if rows.shape != (len(index),) + base.shape[1:]:
        raise DimensionError(f"put_rows: rows {rows.shape} do not fit base {base.shape} at {len(index)} rows")
    out = base.data.copy()
    out[index] = rows.data

    def backward(g):
        gb = g.copy()
        gb[index] = 0.0
        return gb, g[index]

    return Tensor._result(out, (base, rows), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return Tensor._result(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return Tensor._result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; masked-out entries get weight 0.

    A slice whose entries are all masked out yields all zeros.
    """
    if a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (a,), backward)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode or for ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit random generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return Tensor._result(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(logits)`` against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float64)
    s = logits.data
    if s.shape != y.shape:
        raise DimensionError(f"logits {s.shape} and labels {y.shape} differ")
    n = s.size
    loss = np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))
    p = _sigmoid_np(s)
    return Tensor._result(np.asarray(loss.mean()), (logits,), lambda g: (g * (p - y) / n,))


def bce_with_probs(probs: Tensor, labels: np.ndarray, clamp: float = 1e-12) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    p = probs.data
    if p.shape != y.shape:
        raise DimensionError(f"probabilities {p.shape} and labels {y.shape} differ")
    pc = np.clip(p, clamp, 1.0 - clamp)
    n = p.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > clamp) & (p < 1.0 - clamp)

    def backward(g):
        return (g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

    return Tensor._result(np.asarray(loss.mean()), (probs,), backward)


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


@dataclass
class GRUParams:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U_z.shape[0]


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """One GRU step; works on single vectors or row-batches."""
    if x.shape[-1] != p.input_dim or h.shape[-1] != p.hidden_dim:
        raise DimensionError(
            f"gru_cell: x {x.shape} / h {h.shape} vs params ({p.input_dim}, {p.hidden_dim})"
        )
    z = sigmoid(linear(x, p.W_z, p.b_z) + matmul(h, p.U_z))
    r = sigmoid(linear(x, p.W_r, p.b_r) + matmul(h, p.U_r))
    cand = tanh(linear(x, p.W_h, p.b_h) + matmul(r * h, p.U_h))
    return (1.0 - z) * h + z * cand


# ---------------------------------------------------------------------------
# initialization, optimization, gradient checking
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], name: str | None = None) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]."""
    bound = 1.0 / np.sqrt(max(shape[0], 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> None:
    """In-place Adam update with bias correction; ``moments`` is updated too."""
    if t < 1:
        raise StateError(f"Adam step counter must be >= 1, got {t}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise StateError(f"Adam moment/gradient shape mismatch for {name}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        moments[name] = (m, v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.isfinite(p.data).all():
            raise NumericError(f"parameter {name} became non-finite")


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.moments, self.lr, self.betas[0], self.betas[1], self.eps, self.t)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Largest relative error between tape gradients and central differences.

    The error for each input is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)``
    with Euclidean norms over the whole input tensor, so the floor makes the
    error absolute when both gradients vanish.
    """
    inputs = list(inputs)
    saved = [(x.requires_grad, x.grad) for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    try:
        with Tape() as tape:
            out = f(*inputs)
            tape.backward(out)
        analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
        worst = 0.0
        for x, a in zip(inputs, analytic):
            x.data = np.ascontiguousarray(x.data)
            flat = x.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * eps)
            if not np.isfinite(num).all():
                raise NumericError("finite-difference evaluation produced a non-finite value")
            num = num.reshape(x.shape)
            denom = max(np.linalg.norm(a), np.linalg.norm(num), floor)
            worst = max(worst, float(np.linalg.norm(a - num) / denom))
        return worst
    finally:
        for x, (rg, g) in zip(inputs, saved):
            x.requires_grad = rg
            x.grad = g
