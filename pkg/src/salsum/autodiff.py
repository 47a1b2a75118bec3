"""Dense tensor algebra with reverse-mode automatic differentiation.

Every operation builds a dynamic tape (closure graph) that is rebuilt on
each forward pass.  Arrays are numpy-backed; float32 is the training
element type and float64 the verification type for gradient checks and
oracles.  Gradients accumulate additively into ``.grad``; callers zero
them between steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "ShapeMismatchError",
    "MaskError",
    "SingularMatrixError",
    "NonFiniteError",
    "no_grad",
    "tensor",
    "zeros",
    "concat",
    "stack_rows",
    "take_rows",
    "scatter",
    "gather",
    "matmul",
    "affine",
    "softmax",
    "linear_solve",
    "lu_solve",
    "grad_check",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """A softmax mask leaves no position unmasked."""


class SingularMatrixError(ArithmeticError):
    """LU factorization hit a pivot below the singularity threshold."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


# Pivot magnitudes below this abort the LU factorization.
LU_PIVOT_THRESHOLD = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A dense float array that participates in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output.

        Topological order is computed iteratively so long sequence tapes do
        not hit the recursion limit.
        """
        if self.size != 1:
            raise ShapeMismatchError(f"backward requires a scalar output, got shape {self.shape}")
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf
                node._accumulate(g)
                continue
            if node._backward is not None:
                node._run_backward(g, grads)

    def _run_backward(self, g: np.ndarray, grads: dict) -> None:
        parent_grads = self._backward(g)
        for parent, pg in zip(self._parents, parent_grads):
            if pg is None or not _needs_grad(parent):
                continue
            if parent._backward is None and parent.requires_grad:
                parent._accumulate(pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    """Wrap an op result; attach the backward closure only when tracing."""
    _check_finite(data, what)
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), backward, "div")


# -- structural ops --------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, parts, backward, "concat")


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    parts = list(vectors)
    data = np.stack([v.data for v in parts], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return _make(data, parts, backward, "stack_rows")


def take_rows(a: Tensor, ids) -> Tensor:
    """Row selection / embedding lookup; backward scatters additively."""
    idx = np.asarray(ids, dtype=np.int64)
    n_rows = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"row index out of range [0, {n_rows}): {idx.tolist()}")
    data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(data, (a,), backward, "take_rows")


def scatter(x: Tensor, ids, size: int) -> Tensor:
    """Place a 1-D tensor's entries at ``ids`` in a zero vector of ``size``."""
    idx = np.asarray(ids, dtype=np.int64)
    if x.ndim != 1 or idx.shape != x.shape:
        raise ShapeMismatchError(f"scatter expects matching 1-D shapes, got {x.shape} vs {idx.shape}")
    data = np.zeros(size, dtype=x.data.dtype)
    data[idx] = x.data
    return _make(data, (x,), lambda g: (g[idx],), "scatter")


def gather(m: Tensor, ids) -> Tensor:
    """Pick one element per row: out[i] = m[i, ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64)
    n, k = m.shape
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"column index out of range [0, {k}): {idx.tolist()}")
    rows = np.arange(n)
    data = m.data[rows, idx]

    def backward(g):
        gm = np.zeros_like(m.data)
        gm[rows, idx] = g
        return (gm,)

    return _make(data, (m,), backward, "gather")


# -- reductions ------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(data), (a,), backward, "sum")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows of a matrix; output has the row dimension removed."""
    if a.ndim != 2:
        raise ShapeMismatchError(f"mean_rows expects a matrix, got shape {a.shape}")
    n = a.shape[0]
    data = a.data.mean(axis=0)

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(data, (a,), backward, "mean_rows")


# -- matrix products -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product: matrix@matrix, matrix@vector, vector@matrix."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        data = a.data @ b.data

        def backward(g):
            return g @ b.data.T, a.data.T @ g

    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        data = a.data @ b.data

        def backward(g):
            return np.outer(g, b.data), a.data.T @ g

    elif a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        data = a.data @ b.data

        def backward(g):
            return g @ b.data.T, np.outer(a.data, g)

    else:
        raise ShapeMismatchError(f"matmul unsupported ranks: {a.shape} x {b.shape}")
    return _make(data, (a, b), backward, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a vector x, or x @ w.T + b row-wise for a matrix x.

    Weights follow the [out, in] layout throughout the package.
    """
    if x.ndim == 1:
        return add(matmul(w, x), b)
    return add(matmul(x, transpose(w)), b)


# -- nonlinearities ----------------------------------------------------------


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(y, (a,), lambda g: (g * _sigmoid_stable(x),), "softplus")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _make(y, (a,), lambda g: (g * inside,), "clamp")


def softmax(x: Tensor, mask=None) -> Tensor:
    """Numerically stabilized softmax over the last axis.

    ``mask`` is a boolean array over the last axis (True = keep).  Masked
    positions output exactly 0 and receive zero gradient.  Raises MaskError
    if every position is masked.
    """
    data = x.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != data.shape[-1:]:
            raise ShapeMismatchError(f"mask shape {m.shape} does not match last axis of {data.shape}")
        if not m.any():
            raise MaskError("softmax mask excludes every position")
        neg = np.where(m, data, -np.inf)
        shifted = neg - neg.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(shifted), 0.0)
    else:
        shifted = data - data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), backward, "softmax")


# -- linear solve ------------------------------------------------------------


def _lu_factor(a: np.ndarray):
    """In-place LU with partial pivoting; returns (combined LU, row permutation)."""
    n = a.shape[0]
    lu = a.copy()
    perm = np.arange(n)
    for k in range(n):
        pivot_row = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[pivot_row, k]) < LU_PIVOT_THRESHOLD:
            raise SingularMatrixError(f"singular or near-singular matrix: pivot {lu[pivot_row, k]!r} at column {k}")
        if pivot_row != k:
            lu[[k, pivot_row]] = lu[[pivot_row, k]]
            perm[[k, pivot_row]] = perm[[pivot_row, k]]
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, perm


def lu_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b with LU + partial pivoting (plain arrays, no tape)."""
    lu, perm = _lu_factor(np.asarray(a))
    n = lu.shape[0]
    x = np.asarray(b)[perm].astype(lu.dtype, copy=True)
    for i in range(1, n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - lu[i, i + 1 :] @ x[i + 1 :]) / lu[i, i]
    return x


def linear_solve(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable solve of a @ x = b for square nonsingular a.

    Backward uses implicit differentiation: g_b = a^-T @ g_x and
    g_a = -g_b @ x^T.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"linear_solve expects a square matrix, got {a.shape}")
    if b.ndim != 1 or b.shape[0] != a.shape[0]:
        raise ShapeMismatchError(f"linear_solve shapes disagree: {a.shape} vs {b.shape}")
    x = lu_solve(a.data, b.data)

    def backward(g):
        gb = lu_solve(a.data.T, g)
        return -np.outer(gb, x), gb

    return _make(x, (a, b), backward, "linear_solve")


# -- parameters and verification ---------------------------------------------


class ParamStore:
    """Ordered name -> Tensor map for every trainable parameter."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def n_elements(self) -> int:
        return sum(t.size for t in self._entries.values())

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, t in self._entries.items():
            dup.add(name, Tensor(t.data.copy()))
        return dup

    def astype(self, dtype) -> "ParamStore":
        dup = ParamStore()
        for name, t in self._entries.items():
            dup.add(name, Tensor(t.data.astype(dtype)))
        return dup


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-4) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` must be a deterministic scalar function of the parameters, evaluated
    in 64-bit mode.  Every parameter element is perturbed by +/-h; the
    relative error uses a 1e-8 denominator floor.
    """
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("objective evaluated to a non-finite value")
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}
    worst = 0.0
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            g_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f(params).data)
                flat[i] = orig - h
                f_minus = float(f(params).data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                denom = max(1e-8, abs(fd), abs(g_flat[i]))
                worst = max(worst, abs(g_flat[i] - fd) / denom)
    return worst
