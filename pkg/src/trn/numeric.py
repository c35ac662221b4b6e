"""Dense autograd kernel: vectors/matrices, reverse-mode gradients, LSTM cell.

Everything here operates on plain numpy arrays wrapped in :class:`Tensor`
nodes. A tensor is either a 1-d vector or a 2-d matrix; for activations the
second axis, when present, is a batch of column samples, so ``linear`` maps
``(n,) -> (m,)`` and ``(n, B) -> (m, B)`` with the same weights. Training and
gradient checking run in float64.

Ops never mutate their inputs. Gradients accumulate additively into ``.grad``
buffers when ``backward()`` is called on a scalar result, which is what makes
backpropagation through time come out as a sum over steps.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ValidationError(ValueError):
    """A configuration or argument value violates a documented contract."""


class DimensionError(ValidationError):
    """Operands have incompatible shapes."""


_GRAD_ENABLED = True
_FINITE_CHECKS = False


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward math)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def set_finite_checks(enabled: bool) -> None:
    """Debug assertion: when on, every op output is checked for NaN/Inf."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A vector or matrix node in the computation graph.

    ``data`` is the value, ``grad`` the accumulated gradient buffer (same
    shape, allocated lazily during backward). Leaf tensors created from raw
    arrays have no parents; parameter leaves set ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise DimensionError(
                f"tensors are vectors or matrices, got ndim={arr.ndim}"
            )
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar result."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def tensor(data) -> Tensor:
    """Leaf tensor treated as constant input."""
    return Tensor(data)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS: sequence graphs get thousands of nodes deep, recursion
    # would overflow.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))
    order.reverse()
    return order


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Copy on first write: g may be a view or an array shared between
    # closures, and the buffer is mutated by later += accumulations.
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an operation")
    out = Tensor(data)
    if _GRAD_ENABLED and any(_wants_grad(p) for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementary ops


def linear(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """y = W @ x + b for a vector or column-batch x."""
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"linear: weight {w.data.shape} incompatible with bias {b.data.shape}"
        )
    if x.data.shape[0] != w.data.shape[1]:
        raise DimensionError(
            f"linear: weight {w.data.shape} cannot act on input {x.data.shape}"
        )
    if x.data.ndim == 1:
        y = w.data @ x.data + b.data
    else:
        y = w.data @ x.data + b.data[:, None]

    def backward(g):
        if _wants_grad(w):
            if x.data.ndim == 1:
                _accum(w, np.outer(g, x.data))
            else:
                _accum(w, g @ x.data.T)
        if _wants_grad(b):
            _accum(b, g if g.ndim == 1 else g.sum(axis=1))
        if _wants_grad(x):
            _accum(x, w.data.T @ g)

    return _result(y, (w, b, x), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    y = a.data + b.data

    def backward(g):
        if _wants_grad(a):
            _accum(a, g)
        if _wants_grad(b):
            _accum(b, g)

    return _result(y, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    y = x.data * s

    def backward(g):
        if _wants_grad(x):
            _accum(x, g * s)

    return _result(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def backward(g):
        if _wants_grad(x):
            _accum(x, g * (x.data > 0.0))

    return _result(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if _wants_grad(x):
            _accum(x, g * y * (1.0 - y))

    return _result(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        if _wants_grad(x):
            _accum(x, g * (1.0 - y * y))

    return _result(y, (x,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the feature axis (axis 0)."""
    if not parts:
        raise DimensionError("concat: empty input list")
    ndims = {p.data.ndim for p in parts}
    if len(ndims) != 1:
        raise DimensionError("concat: mixed vector/matrix operands")
    if parts[0].data.ndim == 2:
        widths = {p.data.shape[1] for p in parts}
        if len(widths) != 1:
            raise DimensionError("concat: batch widths differ")
    y = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            if _wants_grad(p):
                _accum(p, g[off : off + n])
            off += n

    return _result(y, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along the batch axis (axis 1)."""
    if not parts:
        raise DimensionError("concat_cols: empty input list")
    for p in parts:
        if p.data.ndim != 2:
            raise DimensionError("concat_cols: operands must be matrices")
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_cols: row counts differ")
    y = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, widths):
            if _wants_grad(p):
                _accum(p, g[:, off : off + n])
            off += n

    return _result(y, tuple(parts), backward)


def mean_stack(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors."""
    if not parts:
        raise DimensionError("mean_stack: empty input list")
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise DimensionError(
                f"mean_stack: shape {p.data.shape} differs from {shape}"
            )
    k = len(parts)
    acc = parts[0].data.copy()
    for p in parts[1:]:
        acc += p.data
    y = acc / k

    def backward(g):
        gk = g / k
        for p in parts:
            if _wants_grad(p):
                _accum(p, gk)

    return _result(y, tuple(parts), backward)


def softmax(z: Tensor) -> Tensor:
    """Column-wise probability distribution, max-subtracted for stability."""
    if z.data.shape[0] < 1:
        raise DimensionError("softmax: empty input")
    zd = z.data
    m = zd.max(axis=0, keepdims=zd.ndim == 2)
    e = np.exp(zd - m)
    y = e / e.sum(axis=0, keepdims=zd.ndim == 2)

    def backward(g):
        if _wants_grad(z):
            dot = (g * y).sum(axis=0, keepdims=zd.ndim == 2)
            _accum(z, y * (g - dot))

    return _result(y, (z,), backward)


_CE_CLAMP = 1e-12


def cross_entropy(p: Tensor, label: int) -> Tensor:
    """Negative log-likelihood -log p[label] of a probability vector.

    The picked probability is clamped at 1e-12 before the log; below the
    clamp the gradient is zero.
    """
    if p.data.ndim != 1:
        raise DimensionError(
            f"cross_entropy: expected a probability vector, got {p.data.shape}"
        )
    label = int(label)
    k = p.data.shape[0]
    if not 0 <= label < k:
        raise ValidationError(f"cross_entropy: label {label} out of range [0, {k})")
    picked = p.data[label]
    clamped = max(picked, _CE_CLAMP)
    y = np.array([-math.log(clamped)])

    def backward(g):
        if _wants_grad(p):
            gp = np.zeros_like(p.data)
            if picked >= _CE_CLAMP:
                gp[label] = -g[0] / picked
            _accum(p, gp)

    return _result(y, (p,), backward)


def cross_entropy_cols(p: Tensor, labels: np.ndarray) -> Tensor:
    """Sum of per-column -log p[label_j, j] over a probability matrix."""
    if p.data.ndim != 2:
        raise DimensionError(
            f"cross_entropy_cols: expected a matrix, got {p.data.shape}"
        )
    labels = np.asarray(labels, dtype=np.int64)
    k, n = p.data.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"cross_entropy_cols: {n} columns but labels shape {labels.shape}"
        )
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError("cross_entropy_cols: label out of range")
    cols = np.arange(n)
    picked = p.data[labels, cols]
    clamped = np.maximum(picked, _CE_CLAMP)
    y = np.array([-np.log(clamped).sum()])

    def backward(g):
        if _wants_grad(p):
            gp = np.zeros_like(p.data)
            live = picked >= _CE_CLAMP
            gp[labels[live], cols[live]] = -g[0] / picked[live]
            _accum(p, gp)

    return _result(y, (p,), backward)


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """Packed LSTM weights: rows are the four gates [i, f, g, o].

    ``w`` is (4H, D+H) acting on concat(x, h_prev); ``b`` is (4H,) with the
    forget-gate block initialised to +1.
    """

    w: Tensor
    b: Tensor
    input_dim: int
    hidden_size: int

    @staticmethod
    def init(input_dim: int, hidden_size: int, rng: np.random.Generator) -> "LstmParams":
        h = hidden_size
        w = parameter(_uniform_init(rng, (4 * h, input_dim + h)))
        b0 = np.zeros(4 * h)
        b0[h : 2 * h] = 1.0
        return LstmParams(w, parameter(b0), input_dim, h)

    @staticmethod
    def zeros(input_dim: int, hidden_size: int) -> "LstmParams":
        h = hidden_size
        return LstmParams(
            parameter(np.zeros((4 * h, input_dim + h))),
            parameter(np.zeros(4 * h)),
            input_dim,
            h,
        )


def _uniform_init(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def lstm_step(params: LstmParams, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM step: returns (h, c).

    i, f, o = sigmoid of their pre-activations, g = tanh, then
    c = f*c_prev + i*g and h = o*tanh(c).
    """
    hs = params.hidden_size
    if x.data.shape[0] != params.input_dim:
        raise DimensionError(
            f"lstm_step: input {x.data.shape} but cell expects dim {params.input_dim}"
        )
    for name, t in (("h_prev", h_prev), ("c_prev", c_prev)):
        if t.data.shape[0] != hs:
            raise DimensionError(
                f"lstm_step: {name} {t.data.shape} but hidden size is {hs}"
            )
    z = linear(params.w, params.b, concat([x, h_prev]))
    c = _lstm_cell(z, c_prev, hs)
    h = _lstm_out(z, c, hs)
    return h, c


def _lstm_cell(z: Tensor, c_prev: Tensor, hs: int) -> Tensor:
    zd = z.data
    i = 1.0 / (1.0 + np.exp(-zd[0:hs]))
    f = 1.0 / (1.0 + np.exp(-zd[hs : 2 * hs]))
    g = np.tanh(zd[2 * hs : 3 * hs])
    c = f * c_prev.data + i * g

    def backward(dc):
        if _wants_grad(z):
            gz = np.zeros_like(zd)
            gz[0:hs] = dc * g * i * (1.0 - i)
            gz[hs : 2 * hs] = dc * c_prev.data * f * (1.0 - f)
            gz[2 * hs : 3 * hs] = dc * i * (1.0 - g * g)
            _accum(z, gz)
        if _wants_grad(c_prev):
            _accum(c_prev, dc * f)

    return _result(c, (z, c_prev), backward)


def _lstm_out(z: Tensor, c: Tensor, hs: int) -> Tensor:
    o = 1.0 / (1.0 + np.exp(-z.data[3 * hs : 4 * hs]))
    tc = np.tanh(c.data)
    h = o * tc

    def backward(dh):
        if _wants_grad(z):
            gz = np.zeros_like(z.data)
            gz[3 * hs : 4 * hs] = dh * tc * o * (1.0 - o)
            _accum(z, gz)
        if _wants_grad(c):
            _accum(c, dh * o * (1.0 - tc * tc))

    return _result(h, (z, c), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    _corrupt_analytic: float = 0.0,
) -> float:
    """Compare reverse-mode gradients of the scalar ``f()`` against central
    differences over every coordinate of ``tensors``.

    Returns the max over coordinates of |analytic - numeric| /
    max(1, |analytic|, |numeric|). ``_corrupt_analytic`` deliberately offsets
    one analytic coordinate; it exists so the checker itself can be shown to
    catch a wrong gradient.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    if not np.isfinite(loss.item()):
        raise FloatingPointError("grad_check: loss is not finite")
    loss.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors
    ]
    if _corrupt_analytic:
        analytic[0].reshape(-1)[0] += _corrupt_analytic

    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for j in range(flat.size):
                saved = flat[j]
                flat[j] = saved + h
                up = f().item()
                flat[j] = saved - h
                down = f().item()
                flat[j] = saved
                numeric = (up - down) / (2.0 * h)
                denom = max(1.0, abs(aflat[j]), abs(numeric))
                worst = max(worst, abs(aflat[j] - numeric) / denom)
    return worst
