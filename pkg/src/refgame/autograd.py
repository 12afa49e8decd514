"""Minimal reverse-mode autodiff over dense float64 arrays.

Every differentiable computation in the package runs through the ops in
this module.  Design rules:

* define-by-run: a ``Tape`` records executed ops in order; ``backward``
  replays the record in exact reverse order.
* no silent broadcasting.  Elementwise ops require identical shapes; the
  single documented exception is a size-1 ("scalar") operand for
  ``add``/``sub``/``mul``/``div``.  Row-wise combinations are explicit
  ops (``affine``, ``mul_rows``, ``repeat_cols``).
* float64 throughout, so finite-difference checks can run at 1e-5.

Ops only record onto a tape when one is active (see ``tape()``), which
keeps pure evaluation passes free of graph overhead.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


def _shape_err(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; delegates to the strict ops below.
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def tensor(data):
    """Constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False)


def param(data):
    """Trainable tensor."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of executed ops; backward runs it in reverse."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, out, backward_fn):
        self.nodes.append((out, backward_fn))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss has shape {loss.shape}, expected a scalar")
        if self.consumed:
            raise RuntimeError("backward: tape already consumed; build a fresh graph per step")
        self.consumed = True
        loss.accumulate(np.ones_like(loss.data))
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


_TAPE_STACK: list[Tape] = []


@contextmanager
def tape():
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss):
    """Run reverse accumulation from a scalar loss on the active tape."""
    t = active_tape()
    if t is None:
        raise RuntimeError("backward: no active tape; wrap the forward pass in `with tape():`")
    t.backward(loss)


def _make(op_name, data, parents, backward_fn):
    """Create the output tensor and record it when recording is on."""
    out = Tensor(data)
    t = active_tape()
    if t is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        t.record(out, backward_fn)
    return out


def _is_scalar(x):
    return x.data.size == 1


# ---------------------------------------------------------------------------
# elementwise ops (identical shapes, or one size-1 operand)


def add(a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise _shape_err("add", a.shape, b.shape)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.sum().reshape(a.shape) if _is_scalar(a) and g.shape != a.shape else g)
        if b.requires_grad:
            b.accumulate(g.sum().reshape(b.shape) if _is_scalar(b) and g.shape != b.shape else g)

    return _make("add", out_data, (a, b), bwd)


def sub(a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise _shape_err("sub", a.shape, b.shape)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.sum().reshape(a.shape) if _is_scalar(a) and g.shape != a.shape else g)
        if b.requires_grad:
            b.accumulate(-g.sum().reshape(b.shape) if _is_scalar(b) and g.shape != b.shape else -g)

    return _make("sub", out_data, (a, b), bwd)


def mul(a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise _shape_err("mul", a.shape, b.shape)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            ga = g * b.data
            a.accumulate(ga.sum().reshape(a.shape) if _is_scalar(a) and ga.shape != a.shape else ga)
        if b.requires_grad:
            gb = g * a.data
            b.accumulate(gb.sum().reshape(b.shape) if _is_scalar(b) and gb.shape != b.shape else gb)

    return _make("mul", out_data, (a, b), bwd)


def div(a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise _shape_err("div", a.shape, b.shape)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            ga = g / b.data
            a.accumulate(ga.sum().reshape(a.shape) if _is_scalar(a) and ga.shape != a.shape else ga)
        if b.requires_grad:
            gb = -g * a.data / (b.data * b.data)
            b.accumulate(gb.sum().reshape(b.shape) if _is_scalar(b) and gb.shape != b.shape else gb)

    return _make("div", out_data, (a, b), bwd)


def scale(x, c):
    """Multiply by a python constant (not a graph input)."""
    c = float(c)
    out_data = x.data * c

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * c)

    return _make("scale", out_data, (x,), bwd)


def add_const(x, c):
    """Add a python constant."""
    out_data = x.data + float(c)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g)

    return _make("add_const", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    t = np.exp(-np.abs(x.data))
    pos = 1.0 / (1.0 + t)
    out_data = np.where(x.data >= 0, pos, t / (1.0 + t))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * out_data * (1.0 - out_data))

    return _make("sigmoid", out_data, (x,), bwd)


def tanh(x):
    out_data = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * (1.0 - out_data * out_data))

    return _make("tanh", out_data, (x,), bwd)


def softplus(x):
    out_data = np.logaddexp(0.0, x.data)
    sig = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * sig)

    return _make("softplus", out_data, (x,), bwd)


def exp(x):
    out_data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * out_data)

    return _make("exp", out_data, (x,), bwd)


def log(x):
    if np.any(x.data <= 0):
        bad = float(np.min(x.data))
        raise ValueError(f"log: non-positive input (min value {bad})")
    out_data = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g / x.data)

    return _make("log", out_data, (x,), bwd)


def relu(x):
    # Hinge-style rectifier; subgradient 0 at the kink.
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0))

    return _make("relu", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# row-wise ops on 2D arrays (a 1D vector is accepted as a single row)


def _rows_view(x, op):
    if x.data.ndim == 1:
        return x.data.reshape(1, -1), True
    if x.data.ndim == 2:
        return x.data, False
    raise _shape_err(op, x.shape)


def softmax_rows(x):
    """Row-wise softmax; rows are positive and sum to 1."""
    xd, was_1d = _rows_view(x, "softmax_rows")
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out_data = s[0] if was_1d else s

    def bwd(g):
        if x.requires_grad:
            g2 = g.reshape(1, -1) if was_1d else g
            inner = (g2 * s).sum(axis=1, keepdims=True)
            gx = s * (g2 - inner)
            x.accumulate(gx[0] if was_1d else gx)

    return _make("softmax_rows", out_data, (x,), bwd)


def log_softmax_rows(x):
    """Row-wise log-softmax (stable); exp of the output matches softmax_rows."""
    xd, was_1d = _rows_view(x, "log_softmax_rows")
    m = xd.max(axis=1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out2 = z - lse
    out_data = out2[0] if was_1d else out2
    soft = np.exp(out2)

    def bwd(g):
        if x.requires_grad:
            g2 = g.reshape(1, -1) if was_1d else g
            gx = g2 - soft * g2.sum(axis=1, keepdims=True)
            x.accumulate(gx[0] if was_1d else gx)

    return _make("log_softmax_rows", out_data, (x,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _make("matmul", out_data, (a, b), bwd)


def affine(x, w, b):
    """x @ w + b with the bias added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise _shape_err("affine", x.shape, w.shape, b.shape)
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise _shape_err("affine", x.shape, w.shape, b.shape)
    out_data = x.data @ w.data + b.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    return _make("affine", out_data, (x, w, b), bwd)


def dot(a, b):
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise _shape_err("dot", a.shape, b.shape)
    out_data = np.array([a.data @ b.data])

    def bwd(g):
        s = g[0]
        if a.requires_grad:
            a.accumulate(s * b.data)
        if b.requires_grad:
            b.accumulate(s * a.data)

    return _make("dot", out_data, (a, b), bwd)


def mul_rows(x, col):
    """Scale each row of x by the matching entry of a (B, 1) column."""
    if x.data.ndim != 2 or col.data.ndim != 2 or col.shape != (x.shape[0], 1):
        raise _shape_err("mul_rows", x.shape, col.shape)
    out_data = x.data * col.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * col.data)
        if col.requires_grad:
            col.accumulate((g * x.data).sum(axis=1, keepdims=True))

    return _make("mul_rows", out_data, (x, col), bwd)


def repeat_cols(col, n):
    """Tile a (B, 1) column into (B, n)."""
    if col.data.ndim != 2 or col.shape[1] != 1:
        raise _shape_err("repeat_cols", col.shape)
    out_data = np.repeat(col.data, n, axis=1)

    def bwd(g):
        if col.requires_grad:
            col.accumulate(g.sum(axis=1, keepdims=True))

    return _make("repeat_cols", out_data, (col,), bwd)


def concat_cols(parts):
    """Concatenate 2D blocks along columns."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: empty input")
    if any(p.data.ndim != 2 for p in parts) or len({p.shape[0] for p in parts}) != 1:
        raise _shape_err("concat_cols", *[p.shape for p in parts])
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[:, off:off + w])
            off += w

    return _make("concat_cols", out_data, tuple(parts), bwd)


def slice_cols(x, start, stop):
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {x.shape}")
    out_data = x.data[:, start:stop].copy()

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:stop] += g

    return _make("slice_cols", out_data, (x,), bwd)


def slice_rows(x, start, stop):
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {x.shape}")
    out_data = x.data[start:stop, :].copy()

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop, :] += g

    return _make("slice_rows", out_data, (x,), bwd)


def rows(table, ids):
    """Gather rows of a 2D table by integer ids (hard embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise _shape_err("rows", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"rows: id out of range for table with {table.shape[0]} rows")
    out_data = table.data[ids].copy()

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make("rows", out_data, (table,), bwd)


def pick_per_row(x, ids):
    """Select one entry per row: out[b, 0] = x[b, ids[b]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2 or ids.shape != (x.shape[0],):
        raise _shape_err("pick_per_row", x.shape, ids.shape)
    rng_idx = np.arange(x.shape[0])
    out_data = x.data[rng_idx, ids].reshape(-1, 1)

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[rng_idx, ids] += g[:, 0]

    return _make("pick_per_row", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    out_data = np.array([x.data.sum()])

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, g[0]))

    return _make("sum_all", out_data, (x,), bwd)


def mean_all(x):
    n = x.data.size
    out_data = np.array([x.data.sum() / n])

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, g[0] / n))

    return _make("mean_all", out_data, (x,), bwd)


def sum_rows(x):
    """Sum each row of a 2D array into a (B, 1) column."""
    if x.data.ndim != 2:
        raise _shape_err("sum_rows", x.shape)
    out_data = x.data.sum(axis=1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            x.accumulate(np.repeat(g, x.shape[1], axis=1))

    return _make("sum_rows", out_data, (x,), bwd)


def max_all(x):
    """Maximum entry; subgradient routed to the first (lowest-index) maximum."""
    flat = x.data.reshape(-1)
    idx = int(np.argmax(flat))
    out_data = np.array([flat[idx]])

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad.reshape(-1)[idx] += g[0]

    return _make("max_all", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# straight-through discretization


def straight_through(relaxed, _tol=1e-9):
    """Forward: exact one-hot at the argmax (ties to the lowest index).

    Backward: identity, i.e. the upstream gradient is passed to the
    relaxed probabilities unchanged.  Accepts a probability vector or a
    matrix of probability rows.
    """
    d = relaxed.data
    if d.size == 0:
        raise ShapeError("straight_through: empty input")
    was_1d = d.ndim == 1
    d2 = d.reshape(1, -1) if was_1d else d
    if d2.ndim != 2:
        raise _shape_err("straight_through", relaxed.shape)
    if np.any(d2 < -_tol) or np.any(np.abs(d2.sum(axis=1) - 1.0) > _tol):
        raise ValueError("straight_through: input rows are not probability vectors")
    hard = np.zeros_like(d2)
    hard[np.arange(d2.shape[0]), np.argmax(d2, axis=1)] = 1.0
    out_data = hard[0] if was_1d else hard

    def bwd(g):
        if relaxed.requires_grad:
            relaxed.accumulate(g)

    return _make("straight_through", out_data, (relaxed,), bwd)


# Registry used by the gradient-check harness and the kind-based dispatcher.
# straight_through is deliberately absent: its backward is an identity by
# definition, not the derivative of the forward.
OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "add_const": add_const,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "relu_hinge": relu,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "matmul": matmul,
    "affine": affine,
    "dot": dot,
    "mul_rows": mul_rows,
    "repeat_cols": repeat_cols,
    "concat": concat_cols,
    "slice": slice_cols,
    "slice_rows": slice_rows,
    "rows": rows,
    "pick_per_row": pick_per_row,
    "sum": sum_all,
    "mean": mean_all,
    "sum_rows": sum_rows,
    "max": max_all,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an op by kind name (see OPS for the registry)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown kind {kind!r}") from None
    return fn(*inputs, **kwargs)
