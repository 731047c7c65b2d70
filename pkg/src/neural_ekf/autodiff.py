"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a numpy array whose last two axes are ``(rows, cols)``.  Any
leading axes are batch axes and broadcast the numpy way, so one recorded
operation can cover a whole batch of trajectories (or a whole time axis).
Gradients flowing back into a tensor with fewer batch axes are summed over the
broadcast axes.

Operations are recorded on the innermost active :class:`Tape` (define-by-run).
With no tape active nothing is recorded and the arithmetic runs at numpy cost::

    W = Tensor(np.eye(3), requires_grad=True)
    with Tape() as tape:
        loss = trace(W.T @ W) * 0.5
        tape.backward(loss)
    W.grad  # == W.value

Gradients with respect to the matrix argument of the SPD routines
(:func:`cholesky`, :func:`solve_spd`, :func:`logdet`, :func:`quad_form`) are
returned symmetrized; those routines read only the lower triangle.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DecompositionError",
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "batch_mean",
    "cholesky",
    "concat",
    "diag_embed",
    "diag_part",
    "exp",
    "log",
    "logdet",
    "matmul",
    "mean_over",
    "mul",
    "quad_form",
    "reshape",
    "scale",
    "solve_spd",
    "square",
    "stack",
    "sub",
    "sum_over",
    "symmetrize",
    "tanh",
    "tanh_derivative",
    "total",
    "trace",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class DecompositionError(ValueError):
    """A Cholesky factorization failed.

    ``pivot`` is the 0-based index of the first non-positive pivot and
    ``batch_index`` the offending batch member (``None`` when unbatched).
    """

    def __init__(self, message: str, pivot: int | None = None, batch_index=None):
        super().__init__(message)
        self.pivot = pivot
        self.batch_index = batch_index


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations, replayed in reverse by :meth:`backward`.

    Tapes are single-threaded. Each thread keeps its own stack of active tapes.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: "Tensor") -> dict:
        """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

        Returns a mapping leaf -> accumulated gradient.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return {}
        if loss._tape is None:
            # the loss is itself a leaf
            loss.grad = np.ones_like(loss.value) if loss.grad is None else loss.grad + 1.0
            return {loss: loss.grad}
        if loss._tape is not self:
            raise ContractError("loss was recorded on a different tape")

        adj = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.records):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            grads = fn(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if gp.shape != p.value.shape:
                    gp = _unbroadcast(gp, p.value.shape)
                k = id(p)
                if k in adj:
                    adj[k] = adj[k] + gp
                else:
                    adj[k] = gp
                    if p._tape is not self:
                        leaves[k] = p
        out = {}
        for k, leaf in leaves.items():
            g = adj[k]
            leaf.grad = np.array(g) if leaf.grad is None else leaf.grad + g
            out[leaf] = leaf.grad
        return out


def backward(loss: "Tensor") -> dict:
    """Run the reverse pass of the tape that recorded ``loss``."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return Tape().backward(loss)
    return tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_matrix(value) -> np.ndarray:
    v = np.array(value, dtype=np.float64)
    if v.ndim == 0:
        return v.reshape(1, 1)
    if v.ndim == 1:
        return v.reshape(-1, 1)
    return v


class Tensor:
    """A differentiable matrix (or batch of matrices).

    Scalars become 1x1 matrices and 1-d inputs become column vectors.
    """

    __slots__ = ("value", "requires_grad", "grad", "name", "_tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_matrix(value)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[-2]

    @property
    def cols(self) -> int:
        return self.value.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.value.shape[:-2]

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _const(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _const(value: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    return out


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _const(_as_matrix(x))


def _node(value: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, parents, backward_fn))
    else:
        out.requires_grad = False
        out._tape = None
    return out


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _broadcast_error(op: str, a: Tensor, b: Tensor) -> DimensionError:
    return DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        v = a.value + b.value
    except ValueError:
        raise _broadcast_error("add", a, b) from None
    return _node(v, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        v = a.value - b.value
    except ValueError:
        raise _broadcast_error("sub", a, b) from None
    return _node(v, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _wrap(a), _wrap(b)
    try:
        v = a.value * b.value
    except ValueError:
        raise _broadcast_error("mul", a, b) from None
    av, bv = a.value, b.value
    return _node(v, (a, b), lambda g: (g * bv, g * av))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    return _node(a.value * s, (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Tensor:
    a = _wrap(a)
    v = np.exp(a.value)
    return _node(v, (a,), lambda g: (g * v,))


def log(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.value)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def tanh_derivative(a) -> Tensor:
    """Elementwise ``1 - tanh(a)**2``, itself differentiable."""
    a = _wrap(a)
    t = np.tanh(a.value)
    v = 1.0 - t * t
    return _node(v, (a,), lambda g: (-2.0 * g * t * v,))


# --- structural ------------------------------------------------------------


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _node(_swap(a.value), (a,), lambda g: (_swap(g),))


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Batched-by-unbatched products collapse into one GEMM.
    if y.ndim == 2:
        if x.ndim == 2:
            return x @ y
        return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    if x.ndim == 2 and y.shape[-1] == 1:
        return (y[..., 0] @ x.T)[..., None]
    return np.matmul(x, y)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape[-1] != b.value.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value
    try:
        v = _mm(av, bv)
    except ValueError:
        raise _broadcast_error("matmul", a, b) from None

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            if av.ndim == 2 and bv.ndim > 2 and g.shape[:-2] == bv.shape[:-2]:
                # sum over the batch of G_b @ B_b^T as one GEMM
                ga = _swap(g).reshape(-1, g.shape[-2]).T @ _swap(bv).reshape(-1, bv.shape[-2])
            elif bv.ndim == 2:
                ga = _mm(g, bv.T)
            else:
                ga = np.matmul(g, _swap(bv))
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif av.ndim == 2:
                gb = _mm(av.T, g)
            else:
                gb = np.matmul(_swap(av), g)
        return ga, gb

    return _node(v, (a, b), backward_fn)


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing; the result must keep the two matrix axes."""
    a = _wrap(a)
    v = a.value[key]
    if v.ndim < 2:
        raise ContractError("indexing must keep the last two (matrix) axes")
    shape = a.value.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _node(v, (a,), backward_fn)


def reshape(a, shape: tuple) -> Tensor:
    a = _wrap(a)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -2) -> Tensor:
    """Concatenate along rows (``axis=-2``) or columns (``axis=-1``)."""
    if axis not in (-1, -2):
        raise ContractError("concat works along the matrix axes -2 or -1")
    ts = [_wrap(t) for t in tensors]
    batch = np.broadcast_shapes(*(t.value.shape[:-2] for t in ts))
    vals = []
    for t in ts:
        tail = t.value.shape[-2:]
        vals.append(np.broadcast_to(t.value, batch + tail) if t.value.shape[:-2] != batch else t.value)
    try:
        v = np.concatenate(vals, axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)
        ) from None
    sizes = np.cumsum([t.value.shape[axis] for t in ts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(v, tuple(ts), backward_fn)


def stack(tensors: Sequence) -> Tensor:
    """Stack along a new leading batch axis."""
    ts = [_wrap(t) for t in tensors]
    shape = np.broadcast_shapes(*(t.value.shape for t in ts))
    try:
        v = np.stack([np.broadcast_to(t.value, shape) for t in ts])
    except ValueError:
        raise DimensionError("stack: incompatible shapes") from None
    return _node(v, tuple(ts), lambda g: tuple(g))


def total(a) -> Tensor:
    """Sum of the entries of each matrix, shape ``(..., 1, 1)``."""
    a = _wrap(a)
    shape = a.value.shape
    v = a.value.sum(axis=(-2, -1), keepdims=True)
    return _node(v, (a,), lambda g: (np.broadcast_to(g, shape),))


def sum_over(a, axis: int = 0) -> Tensor:
    """Sum over one leading (batch) axis, removing it."""
    a = _wrap(a)
    if axis < 0 or axis >= a.value.ndim - 2:
        raise ContractError("sum_over reduces a leading batch axis")
    shape = a.value.shape
    v = a.value.sum(axis=axis)
    return _node(v, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def mean_over(a, axis: int = 0) -> Tensor:
    a = _wrap(a)
    return scale(sum_over(a, axis), 1.0 / a.value.shape[axis])


def batch_mean(a) -> Tensor:
    """Average over every leading axis, leaving one ``(rows, cols)`` matrix."""
    a = _wrap(a)
    while a.value.ndim > 2:
        a = mean_over(a, 0)
    return a


def trace(a) -> Tensor:
    a = _wrap(a)
    n = a.value.shape[-1]
    if a.value.shape[-2] != n:
        raise DimensionError(f"trace of non-square shape {a.shape}")
    v = np.trace(a.value, axis1=-2, axis2=-1)[..., None, None]
    eye = np.eye(n)
    return _node(v, (a,), lambda g: (g * eye,))


def diag_part(a) -> Tensor:
    """Diagonal of a square matrix as a column vector."""
    a = _wrap(a)
    n = a.value.shape[-1]
    if a.value.shape[-2] != n:
        raise DimensionError(f"diag_part of non-square shape {a.shape}")
    v = np.diagonal(a.value, axis1=-2, axis2=-1)[..., None]
    eye = np.eye(n)
    return _node(np.array(v), (a,), lambda g: (g * eye,))


def diag_embed(v) -> Tensor:
    """Column vector -> diagonal matrix."""
    v = _wrap(v)
    if v.value.shape[-1] != 1:
        raise DimensionError(f"diag_embed needs a column vector, got {v.shape}")
    eye = np.eye(v.value.shape[-2])
    return _node(v.value * eye, (v,), lambda g: (np.diagonal(g, axis1=-2, axis2=-1)[..., None],))


def symmetrize(a, jitter: float = 0.0) -> Tensor:
    """``(a + a^T) / 2 + jitter * I``."""
    a = _wrap(a)
    n = a.value.shape[-1]
    if a.value.shape[-2] != n:
        raise DimensionError(f"symmetrize of non-square shape {a.shape}")
    v = 0.5 * (a.value + _swap(a.value))
    if jitter:
        v = v + jitter * np.eye(n)
    return _node(v, (a,), lambda g: (0.5 * (g + _swap(g)),))


# --- SPD linear algebra ----------------------------------------------------


def _first_bad_pivot(m: np.ndarray) -> int:
    # unpivoted Cholesky scan on one matrix, only used on the failure path
    m = np.array(m, dtype=np.float64)
    n = m.shape[0]
    L = np.zeros_like(m)
    for j in range(n):
        d = m[j, j] - L[j, :j] @ L[j, :j]
        if not np.isfinite(d) or d <= 0.0:
            return j
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (m[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return n - 1


def _chol(a: np.ndarray) -> np.ndarray:
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"cholesky of non-square shape {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    if a.ndim == 2:
        j = _first_bad_pivot(a)
        raise DecompositionError(f"matrix not positive definite (pivot {j})", pivot=j)
    flat = a.reshape(-1, a.shape[-2], a.shape[-1])
    for b, m in enumerate(flat):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            j = _first_bad_pivot(m)
            idx = np.unravel_index(b, a.shape[:-2])
            raise DecompositionError(
                f"matrix not positive definite (pivot {j}, batch index {tuple(int(i) for i in idx)})",
                pivot=j,
                batch_index=tuple(int(i) for i in idx),
            ) from None
    raise DecompositionError("matrix not positive definite")


def _cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape[:-2] != L.shape[:-2]:
        batch = np.broadcast_shapes(L.shape[:-2], b.shape[:-2])
        L = np.broadcast_to(L, batch + L.shape[-2:])
        b = np.broadcast_to(b, batch + b.shape[-2:])
    y = np.linalg.solve(L, b)
    return np.linalg.solve(_swap(L), y)


def _sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + _swap(x))


def cholesky(a, symmetry_tol: float = 1e-9) -> Tensor:
    """Lower-triangular ``L`` with ``L @ L.T == a`` and positive diagonal."""
    a = _wrap(a)
    av = a.value
    if av.shape[-1] != av.shape[-2]:
        raise DimensionError(f"cholesky of non-square shape {a.shape}")
    asym = np.max(np.abs(av - _swap(av))) if av.size else 0.0
    if asym > symmetry_tol * max(1.0, float(np.max(np.abs(av)))):
        raise ContractError(f"cholesky input not symmetric (max asymmetry {asym:.3e})")
    L = _chol(av)
    n = av.shape[-1]
    tril = np.tril(np.ones((n, n)))

    def backward_fn(g):
        # A_bar = sym(L^-T Phi(L^T L_bar) L^-1)
        P = _swap(L) @ (g * tril)
        P = np.tril(P) - 0.5 * np.eye(n) * P
        X = np.linalg.solve(_swap(L), P)  # L^-T P
        S = _swap(np.linalg.solve(_swap(L), _swap(X)))  # (L^-T X^T)^T = X L^-1
        return (_sym(S),)

    return _node(L, (a,), backward_fn)


def solve_spd(a, b) -> Tensor:
    """Solve ``a @ x = b`` for symmetric positive definite ``a``."""
    a, b = _wrap(a), _wrap(b)
    if a.value.shape[-2] != b.value.shape[-2]:
        raise DimensionError(f"solve_spd: shapes {a.shape} and {b.shape} do not align")
    L = _chol(a.value)
    x = _cho_solve(L, b.value)

    def backward_fn(g):
        gb = _cho_solve(L, g)
        ga = -_sym(gb @ _swap(x)) if a.requires_grad else None
        return ga, gb

    return _node(x, (a, b), backward_fn)


def logdet(a) -> Tensor:
    """``log|a|`` of an SPD matrix via its Cholesky factor, shape ``(..., 1, 1)``."""
    a = _wrap(a)
    L = _chol(a.value)
    v = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)[..., None, None]
    n = a.value.shape[-1]

    def backward_fn(g):
        inv = _cho_solve(L, np.broadcast_to(np.eye(n), L.shape))
        return (g * inv,)

    return _node(v, (a,), backward_fn)


def quad_form(v, m) -> Tensor:
    """``v^T m^{-1} v`` for SPD ``m`` and column ``v``, shape ``(..., 1, 1)``."""
    v, m = _wrap(v), _wrap(m)
    if v.value.shape[-1] != 1 or v.value.shape[-2] != m.value.shape[-1]:
        raise DimensionError(f"quad_form: shapes {v.shape} and {m.shape} do not align")
    L = _chol(m.value)
    y = _cho_solve(L, v.value)
    val = (np.broadcast_to(v.value, y.shape) * y).sum(axis=-2, keepdims=True)

    def backward_fn(g):
        return 2.0 * g * y, -g * (y @ _swap(y))

    return _node(val, (v, m), backward_fn)
