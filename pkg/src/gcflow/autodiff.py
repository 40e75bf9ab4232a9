"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the value it
produces; the recorded graph is the tape. ``Tensor.backward`` replays the
tape in reverse topological order, accumulating gradients additively into
every tensor built with ``requires_grad=True``. Only first-order gradients
of a scalar output are supported, which is all the training loops here need.

All storage is float64. Gradients of parameters accumulate across backward
calls until ``zero_grad`` (or ``zero_grads``) resets them; gradients of
intermediate nodes are cleared at the start of each backward pass.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse

from .errors import DomainError, ShapeError

LRELU_SLOPE = 0.2


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A dense float64 array plus its gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- tape ----------------------------------------------------------

    def _topo(self):
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self):
        """Populate gradients of every requires-grad tensor reachable from here.

        Only a scalar output may start a backward pass. Gradients of leaf
        tensors accumulate additively across calls; intermediates are reset
        each call so repeated backward passes double leaf gradients rather
        than compounding them through the interior of the graph.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        order = self._topo()
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn, op="custom") -> Tensor:
    """Create an op-result tensor; recorded on the tape only when a parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
        out._op = op
    return out


# -- binary elementwise (broadcasting) ---------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.shape)

        return run

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.shape)

        return run

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.shape)

        return run

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    """Elementwise quotient; the caller guarantees a nonzero denominator."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad / b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape)

        return run

    return make_node(a.data / b.data, (a, b), bw, "div")


# -- matrix products ---------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += out.grad @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ out.grad

        return run

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def left_matmul_const(matrix, x):
    """``matrix @ x`` where ``matrix`` is a constant (dense or scipy sparse)."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"left_matmul_const: {matrix.shape} @ {x.shape}")
    if scipy.sparse.issparse(matrix):
        value = matrix @ x.data
        mt = matrix.T.tocsr()
    else:
        value = np.asarray(matrix) @ x.data
        mt = np.asarray(matrix).T

    def bw(out):
        def run():
            if x.requires_grad:
                x.grad += mt @ out.grad

        return run

    return make_node(value, (x,), bw, "const_matmul")


# -- elementwise unary -------------------------------------------------


def _unary(a, value, local_grad_fn, op):
    a = as_tensor(a)

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += local_grad_fn(out) * out.grad

        return run

    return make_node(value, (a,), bw, op)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    if not np.all(np.isfinite(value)):
        raise DomainError("exp overflow")
    return _unary(a, value, lambda out: out.data, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _unary(a, np.log(a.data), lambda out: 1.0 / a.data, "log")


def tanh(a):
    a = as_tensor(a)
    return _unary(a, np.tanh(a.data), lambda out: 1.0 - out.data * out.data, "tanh")


def sigmoid(a):
    a = as_tensor(a)
    value = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, value, lambda out: out.data * (1.0 - out.data), "sigmoid")


def relu(a):
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), lambda out: (a.data > 0.0).astype(np.float64), "relu")


def lrelu(a, slope=LRELU_SLOPE):
    a = as_tensor(a)
    value = np.where(a.data > 0.0, a.data, slope * a.data)
    return _unary(a, value, lambda out: np.where(a.data > 0.0, 1.0, slope), "lrelu")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where the input is strictly interior."""
    a = as_tensor(a)
    value = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return _unary(a, value, lambda out: mask.astype(np.float64), "clamp")


# -- softmax family ----------------------------------------------------


def row_softmax(a):
    """Row-wise softmax of a matrix, stabilized by row-max subtraction."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def run():
            if a.requires_grad:
                inner = (out.grad * out.data).sum(axis=1, keepdims=True)
                a.grad += out.data * (out.grad - inner)

        return run

    return make_node(value, (a,), bw, "row_softmax")


def logsumexp_rows(a):
    """log(sum(exp(row))) for each row of a matrix, returned as a vector."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a matrix, got shape {a.shape}")
    m = a.data.max(axis=1, keepdims=True)
    value = (m + np.log(np.exp(a.data - m).sum(axis=1, keepdims=True))).reshape(-1)

    def bw(out):
        def run():
            if a.requires_grad:
                soft = np.exp(a.data - value[:, None])
                a.grad += soft * out.grad[:, None]

        return run

    return make_node(value, (a,), bw, "logsumexp_rows")


# -- reductions and reshapes -------------------------------------------


def tsum(a, axis=None):
    a = as_tensor(a)
    if axis is not None and (a.data.ndim != 2 or axis not in (0, 1)):
        raise ShapeError(f"sum axis {axis} invalid for shape {a.shape}")
    value = a.data.sum() if axis is None else a.data.sum(axis=axis)

    def bw(out):
        def run():
            if not a.requires_grad:
                return
            if axis is None:
                a.grad += out.grad
            elif axis == 0:
                a.grad += out.grad[None, :]
            else:
                a.grad += out.grad[:, None]

        return run

    return make_node(value, (a,), bw, "sum")


def tmean(a):
    a = as_tensor(a)
    n = a.data.size

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += out.grad / n

        return run

    return make_node(a.data.mean(), (a,), bw, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad += out.grad.reshape(a.shape)

        return run

    return make_node(a.data.reshape(shape), (a,), bw, "reshape")


def slice_cols(a, j0, j1):
    a = as_tensor(a)
    if a.data.ndim != 2 or not (0 <= j0 <= j1 <= a.shape[1]):
        raise ShapeError(f"column slice [{j0}:{j1}] invalid for shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad[:, j0:j1] += out.grad

        return run

    return make_node(a.data[:, j0:j1].copy(), (a,), bw, "slice_cols")


def slice_rows(a, i0, i1):
    a = as_tensor(a)
    if a.data.ndim != 2 or not (0 <= i0 <= i1 <= a.shape[0]):
        raise ShapeError(f"row slice [{i0}:{i1}] invalid for shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a.grad[i0:i1, :] += out.grad

        return run

    return make_node(a.data[i0:i1, :].copy(), (a,), bw, "slice_rows")


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects a non-empty list of matrices")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def bw(out):
        def run():
            for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.grad += out.grad[:, j0:j1]

        return run

    return make_node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw, "concat_cols")


def stack_cols(vectors):
    """Stack length-n vectors into the columns of an n x k matrix."""
    vectors = [as_tensor(v) for v in vectors]
    if not vectors or any(v.data.ndim != 1 for v in vectors):
        raise ShapeError("stack_cols expects a non-empty list of vectors")
    n = vectors[0].shape[0]
    if any(v.shape[0] != n for v in vectors):
        raise ShapeError("stack_cols: vector lengths differ")

    def bw(out):
        def run():
            for k, v in enumerate(vectors):
                if v.requires_grad:
                    v.grad += out.grad[:, k]

        return run

    return make_node(np.stack([v.data for v in vectors], axis=1), tuple(vectors), bw, "stack_cols")


# -- indexed access ----------------------------------------------------


def gather_rows(a, indices):
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"gather_rows: indices out of range for shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                np.add.at(a.grad, idx, out.grad)

        return run

    return make_node(a.data[idx, :], (a,), bw, "gather_rows")


def take_per_row(a, cols):
    """Pick entry ``a[i, cols[i]]`` from each row, as a vector."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: need one column index per row of {a.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ShapeError("take_per_row: column index out of range")
    rows = np.arange(a.shape[0])

    def bw(out):
        def run():
            if a.requires_grad:
                np.add.at(a.grad, (rows, cols), out.grad)

        return run

    return make_node(a.data[rows, cols], (a,), bw, "take_per_row")


def scatter_matrix(values, rows, cols, shape):
    """Place a vector of values at (rows[i], cols[i]) in a zero matrix."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if values.data.ndim != 1 or rows.shape != values.shape or cols.shape != values.shape:
        raise ShapeError("scatter_matrix: values, rows, cols must be equal-length vectors")
    base = np.zeros(shape)
    np.add.at(base, (rows, cols), values.data)

    def bw(out):
        def run():
            if values.requires_grad:
                values.grad += out.grad[rows, cols]

        return run

    return make_node(base, (values,), bw, "scatter_matrix")


# -- gradient utilities ------------------------------------------------


def zero_grads(params):
    for p in params:
        p.zero_grad()


def grad_check(f, params, h=1e-5):
    """Max relative error between analytic and central finite-difference gradients.

    ``f`` is a zero-argument callable evaluating a scalar Tensor from the
    current values of ``params``. The relative error per coordinate is
    |analytic - central| / max(1, |central|); the max over all coordinates
    of all params is returned.
    """
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = f().item()
            flat[i] = saved - h
            fm = f().item()
            flat[i] = saved
            central = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
