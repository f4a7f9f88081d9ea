"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: ranks 0..3, no batch axis (one sample flows through a
graph at a time; batching is an outer loop, which keeps per-sample cost
accounting exact), and only the operations the curve networks need.
Every op records a backward closure; calling ``backward()`` on a scalar
output walks the graph once in reverse topological order and accumulates
gradients into ``requires_grad`` leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

PROB_EPS = 1e-12  # probabilities are clamped to [PROB_EPS, 1] before any log

DEBUG_CHECKS = False  # when True, every op output is checked for NaN/Inf


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an operation produces NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (use on inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def sum(self) -> "Tensor":
        return _reduce(self, mean=False)

    def mean(self) -> "Tensor":
        return _reduce(self, mean=True)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced a non-finite value")
    out = Tensor(data)
    if _grad_enabled:
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _is_scalar_like(a: np.ndarray) -> bool:
    return a.size == 1 and a.ndim <= 1


# -- elementwise arithmetic --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape == b.data.shape:
        def bk(g):
            _accum(a, g)
            _accum(b, g)
        return _record(a.data + b.data, (a, b), bk)
    if _is_scalar_like(b.data):
        def bk(g):
            _accum(a, g)
            _accum(b, np.asarray(g.sum()).reshape(b.data.shape))
        return _record(a.data + b.data, (a, b), bk)
    if _is_scalar_like(a.data):
        def bk(g):
            _accum(a, np.asarray(g.sum()).reshape(a.data.shape))
            _accum(b, g)
        return _record(a.data + b.data, (a, b), bk)
    raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not match")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    da, db = a.data, b.data
    if da.shape == db.shape:
        def bk(g):
            _accum(a, g * db)
            _accum(b, g * da)
        return _record(da * db, (a, b), bk)
    if _is_scalar_like(db):
        def bk(g):
            _accum(a, g * db)
            _accum(b, np.asarray((g * da).sum()).reshape(db.shape))
        return _record(da * db, (a, b), bk)
    if _is_scalar_like(da):
        def bk(g):
            _accum(a, np.asarray((g * db).sum()).reshape(da.shape))
            _accum(b, g * da)
        return _record(da * db, (a, b), bk)
    raise ShapeError(f"mul: shapes {da.shape} and {db.shape} do not match")


def neg(a) -> Tensor:
    a = _wrap(a)

    def bk(g):
        _accum(a, -g)

    return _record(-a.data, (a,), bk)


def scale_positions(x: Tensor, s) -> Tensor:
    """Multiply a [C, W] feature map by a per-position weight vector [W].

    The weight broadcasts across channels. Gradient flows into both
    arguments (the weight gradient is summed over channels).
    """
    x = _wrap(x)
    s = _wrap(s)
    if x.data.ndim != 2 or s.data.ndim != 1:
        raise ShapeError(
            f"scale_positions: expected [C, W] and [W], got {x.data.shape} and {s.data.shape}"
        )
    if x.data.shape[1] != s.data.shape[0]:
        raise ShapeError(
            f"scale_positions: width mismatch {x.data.shape[1]} vs {s.data.shape[0]} (position axis)"
        )
    row = s.data[None, :]

    def bk(g):
        _accum(x, g * row)
        _accum(s, (g * x.data).sum(axis=0))

    return _record(x.data * row, (x, s), bk)


def _reduce(a: Tensor, mean: bool) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    value = a.data.mean() if mean else a.data.sum()

    def bk(g):
        scale = float(g) / n if mean else float(g)
        _accum(a, np.full(a.data.shape, scale))

    return _record(np.asarray(value), (a,), bk)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    new = a.data.reshape(shape)

    def bk(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(new, (a,), bk)


# -- activations --------------------------------------------------------


def relu(a) -> Tensor:
    a = _wrap(a)

    def bk(g):
        _accum(a, g * (a.data > 0))

    return _record(np.maximum(a.data, 0.0), (a,), bk)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    t = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bk(g):
        _accum(a, g * out * (1.0 - out))

    return _record(out, (a,), bk)


# -- structured ops ------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation of a [C_in, W] map with a [C_out, C_in, K] kernel.

    Implemented as an im2col matrix product so the heavy lifting is a
    single BLAS call; the backward pass is two more matrix products plus
    a K-step scatter-add back onto the padded input.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d: input must be [C_in, W], got shape {x.data.shape}")
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be [C_out, C_in, K], got shape {kernel.data.shape}")
    if bias.data.ndim != 1:
        raise ShapeError(f"conv1d: bias must be [C_out], got shape {bias.data.shape}")
    c_in, width = x.data.shape
    c_out, k_in, ksize = kernel.data.shape
    if k_in != c_in:
        raise ShapeError(
            f"conv1d: kernel expects {k_in} input channels, input has {c_in} (channel axis)"
        )
    if bias.data.shape[0] != c_out:
        raise ShapeError(f"conv1d: bias has {bias.data.shape[0]} channels, kernel emits {c_out}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv1d: invalid stride={stride} or padding={padding}")
    padded_w = width + 2 * padding
    if ksize > padded_w:
        raise ShapeError(f"conv1d: kernel size {ksize} exceeds padded width {padded_w}")

    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    w_out = (padded_w - ksize) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, ksize, axis=1)[:, ::stride, :]
    cols = windows.transpose(0, 2, 1).reshape(c_in * ksize, w_out)
    kmat = kernel.data.reshape(c_out, c_in * ksize)
    out = kmat @ cols + bias.data[:, None]

    def bk(g):
        if kernel.requires_grad:
            _accum(kernel, (g @ cols.T).reshape(kernel.data.shape))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=1))
        if x.requires_grad:
            colg = (kmat.T @ g).reshape(c_in, ksize, w_out)
            gxp = np.zeros((c_in, padded_w))
            for kk in range(ksize):
                stop = kk + stride * (w_out - 1) + 1
                gxp[:, kk:stop:stride] += colg[:, kk, :]
            _accum(x, gxp[:, padding:padding + width] if padding else gxp)

    return _record(out, (x, kernel, bias), bk)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a rank-1 vector: weight @ x + bias."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"linear: expected x [D], weight [O, D], bias [O]; got "
            f"{x.data.shape}, {weight.data.shape}, {bias.data.shape}"
        )
    o, d = weight.data.shape
    if d != x.data.shape[0]:
        raise ShapeError(f"linear: weight expects {d} inputs, x has {x.data.shape[0]} (input axis)")
    if bias.data.shape[0] != o:
        raise ShapeError(f"linear: bias has {bias.data.shape[0]} outputs, weight emits {o}")
    out = weight.data @ x.data + bias.data

    def bk(g):
        if x.requires_grad:
            _accum(x, weight.data.T @ g)
        if weight.requires_grad:
            _accum(weight, np.outer(g, x.data))
        if bias.requires_grad:
            _accum(bias, g)

    return _record(out, (x, weight, bias), bk)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the position axis: [C, W] -> [C], or [W] -> scalar."""
    x = _wrap(x)
    if x.data.ndim == 2:
        width = x.data.shape[1]

        def bk(g):
            _accum(x, np.broadcast_to((g / width)[:, None], x.data.shape))

        return _record(x.data.mean(axis=1), (x,), bk)
    if x.data.ndim == 1:
        width = x.data.shape[0]

        def bk(g):
            _accum(x, np.broadcast_to(g / width, x.data.shape))

        return _record(np.asarray(x.data.mean()), (x,), bk)
    raise ShapeError(f"global_avg_pool: expected rank 1 or 2, got shape {x.data.shape}")


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax of a rank-1 logit vector."""
    x = _wrap(x)
    if x.data.ndim != 1:
        raise ShapeError(f"softmax: expected rank-1 logits, got shape {x.data.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def bk(g):
        _accum(x, out * (g - np.dot(g, out)))

    return _record(out, (x,), bk)


# -- losses --------------------------------------------------------------


def cross_entropy(probs: Tensor, label: int) -> Tensor:
    """Negative log probability of the true class.

    ``probs`` is already a distribution (softmax output). Values are
    clamped to [PROB_EPS, 1] before the log; the clamp blocks gradient
    outside its range.
    """
    probs = _wrap(probs)
    if probs.data.ndim != 1:
        raise ShapeError(f"cross_entropy: expected rank-1 probabilities, got {probs.data.shape}")
    label = int(label)
    n = probs.data.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"cross_entropy: target class index {label} out of range [0, {n})")
    clamped = float(np.clip(probs.data[label], PROB_EPS, 1.0))
    raw = float(probs.data[label])
    value = -np.log(clamped)

    def bk(g):
        if probs.requires_grad and PROB_EPS <= raw <= 1.0:
            gp = np.zeros(n)
            gp[label] = -float(g) / clamped
            _accum(probs, gp)

    return _record(np.asarray(value), (probs,), bk)


def kl_div(teacher: Tensor, student: Tensor) -> Tensor:
    """KL(teacher || student) between two rank-1 distributions.

    The teacher is treated as a constant: gradient flows only into the
    student argument (stop-gradient contract). Both sides are clamped to
    [PROB_EPS, 1] before the logs.
    """
    teacher, student = _wrap(teacher), _wrap(student)
    if teacher.data.shape != student.data.shape or teacher.data.ndim != 1:
        raise ShapeError(
            f"kl_div: distributions must share a rank-1 shape, got "
            f"{teacher.data.shape} and {student.data.shape}"
        )
    t = np.clip(teacher.data, PROB_EPS, 1.0)
    s = np.clip(student.data, PROB_EPS, 1.0)
    value = float(np.sum(t * (np.log(t) - np.log(s))))
    raw_s = student.data

    def bk(g):
        if student.requires_grad:
            mask = (raw_s >= PROB_EPS) & (raw_s <= 1.0)
            _accum(student, np.where(mask, -t / s, 0.0) * float(g))

    return _record(np.asarray(value), (student,), bk)
