"""Dense float64 arrays with a small reverse-mode tape.

Only what the MLP policies and the linear-surrogate algebra need: rank <= 2
tensors, a handful of elementwise ops, matmul, row-broadcast bias adds and
reductions.  Every op result is checked for NaN/Inf.

Typical use::

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    loss = mean(square(matmul(x, w) - y))
    (gw,) = tape.backward(loss)
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

__all__ = [
    "NonFiniteError",
    "IllConditionedError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "gelu",
    "square",
    "smooth_abs",
    "sum",
    "mean",
    "row_sum",
    "concat",
    "solve",
    "lstsq_residual",
    "lstsq_residual_l1",
]

MAX_CONDITION = 1e12


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class IllConditionedError(np.linalg.LinAlgError):
    """Raised by :func:`solve` for singular or badly conditioned systems."""


def _check(out, opname):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{opname} produced non-finite values")
    return out


class Tensor:
    """Immutable float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape=None, index=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ValueError(f"rank {arr.ndim} tensors are not supported")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.index = index

    @classmethod
    def _owned(cls, arr, tape=None, index=None):
        # arr is a fresh op result: skip the defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data, t.tape, t.index = arr, tape, index
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        flag = ", tape" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of ops for one backward pass.

    Records are appended in creation order, so walking them in reverse is a
    valid reverse topological order.  Leaves are the parameter slots whose
    gradients :meth:`backward` returns.
    """

    def __init__(self):
        self.records = []  # (out_index, inputs, backward_fn)
        self.leaves = []
        self._n = 0
        self._consumed = False

    def _new_index(self):
        self._n += 1
        return self._n - 1

    def leaf(self, data):
        if self._consumed:
            raise RuntimeError("tape already consumed")
        t = Tensor(data, self, self._new_index())
        self.leaves.append(t)
        return t

    def record(self, out_data, inputs, backward_fn):
        t = Tensor._owned(out_data, self, self._new_index())
        self.records.append((t.index, inputs, backward_fn))
        return t

    def backward(self, loss):
        """Return d(loss)/d(leaf) for every leaf, in leaf order."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._consumed = True
        grads = {loss.index: np.ones_like(loss.data)}
        for out_index, inputs, backward_fn in reversed(self.records):
            g = grads.pop(out_index, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not isinstance(inp, Tensor) or inp.tape is not self:
                    continue
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + gi
                else:
                    grads[inp.index] = gi
        out = []
        for leaf in self.leaves:
            g = grads.get(leaf.index)
            out.append(np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape))
        return out


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _emit(out, inputs, backward_fn, opname):
    _check(out, opname)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._owned(out)
    return tape.record(out, inputs, backward_fn)


def _unbroadcast(g, shape):
    """Sum a gradient back down to ``shape`` (scalar or row-vector broadcast)."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum()
    if len(shape) == 1 and g.ndim == 2:
        return g.sum(axis=0)
    return g.reshape(shape)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ValueError("matmul needs rank >= 1 operands")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), back, "matmul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    return _emit(
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
        "mul",
    )


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a):
    return scale(a, -1.0)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _emit(out, (a,), back, "gelu")


def square(a):
    a = as_tensor(a)
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def smooth_abs(a, delta=1e-6):
    """sqrt(x^2 + delta^2) - delta; differentiable stand-in for |x|."""
    a = as_tensor(a)
    x = a.data
    r = np.sqrt(x * x + delta * delta)
    return _emit(r - delta, (a,), lambda g: (g * x / r,), "smooth_abs")


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _emit(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean"
    )


def row_sum(a):
    """Sum over the last axis of a 2-D tensor, giving one value per row."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("row_sum needs a 2-D tensor")
    shape = a.shape
    return _emit(
        a.data.sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], shape),), "row_sum"
    )


def concat(parts):
    """Concatenate 2-D tensors along columns."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        if p.data.ndim != 2:
            raise ValueError("concat needs 2-D tensors")
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back, "concat")


def solve(A, B):
    """Solve ``A X = B`` for square, well-conditioned ``A``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"solve needs a square matrix, got {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"solve shape mismatch {A.shape} vs {B.shape}")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedError(f"condition number {cond:.3g} exceeds {MAX_CONDITION:.0e}")
    return _check(scipy.linalg.solve(A, B), "solve")


def _column_space_basis(A, rtol=1e-12):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.shape[1] == 0:
        raise ValueError("A needs at least one column")
    Q, R, _ = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return Q[:, :0]
    rank = int(np.sum(diag > rtol * diag[0]))
    return Q[:, :rank]


def lstsq_residual(A, a):
    """min_c ||a - A c||_2 via column-pivoted QR (rank-revealing)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    Q = _column_space_basis(A)
    r = a - Q @ (Q.T @ a)
    return float(np.linalg.norm(r))


def lstsq_residual_l1(A, a):
    """min_c ||a - A c||_1, solved as a small linear program."""
    from scipy.optimize import linprog

    a = np.asarray(a, dtype=np.float64).ravel()
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d, k = A.shape
    # variables: c (k, free), u (d, >= 0) with -u <= a - A c <= u
    cost = np.concatenate([np.zeros(k), np.ones(d)])
    A_ub = np.block([[-A, -np.eye(d)], [A, -np.eye(d)]])
    b_ub = np.concatenate([-a, a])
    bounds = [(None, None)] * k + [(0, None)] * d
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"L1 projection failed: {res.message}")
    return float(res.fun)
