"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every learnable quantity in the splitting pipeline lives in a :class:`Tensor`.
Graphs are built dynamically on each forward pass and differentiated with
:meth:`Tensor.backward`.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a scalar (size-1) operand, nothing else. Row/column expansion is
done explicitly (``outer`` / ``add_rows``) so shape bugs fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_LEAKY_SLOPE = 0.2


class Tensor:
    """Dense float64 array that records how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- reverse pass --------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every node that requires grad.

        ``grad`` defaults to ones for a scalar root. Gradients add onto any
        existing ``.grad`` so fan-out and repeated calls accumulate.
        """
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar root")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ValueError(f"root gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mean(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: non-finite result")
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = True
    t._parents = tuple(parents)
    t._backward = backward
    t.op = op
    return t


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    # t is the size-1 side of a scalar broadcast
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _finite(a.data + b.data, "add")
    return _make(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = _finite(a.data - b.data, "sub")
    return _make(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _finite(a.data * b.data, "mul")
    return _make(out, (a, b), lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero in denominator")
    out = _finite(a.data / b.data, "div")

    def backward(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * a.data / (b.data * b.data), b)

    return _make(out, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _finite(np.exp(a.data), "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise FloatingPointError("log: non-positive input")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise FloatingPointError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        safe = out > 0
        return (np.where(safe, g / (2.0 * np.where(safe, out, 1.0)), 0.0),)

    return _make(out, (a,), backward, "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    out = _finite(a.data * a.data, "square")
    return _make(out, (a,), lambda g: (2.0 * g * a.data,), "square")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _finite(a.data @ b.data, "matmul")
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def outer(col, width: int) -> Tensor:
    """Repeat a length-n vector into an n x width matrix (column broadcast)."""
    col = as_tensor(col)
    v = col.data.reshape(-1)
    out = np.repeat(v[:, None], width, axis=1)
    return _make(out, (col,), lambda g: (g.sum(axis=1).reshape(col.shape),), "outer")


def add_rows(x, row) -> Tensor:
    """x[n, d] + row[d] broadcast over rows (bias add)."""
    x, row = as_tensor(x), as_tensor(row)
    if x.ndim != 2 or row.size != x.shape[1]:
        raise ValueError(f"add_rows: {x.shape} vs {row.shape}")
    out = _finite(x.data + row.data.reshape(1, -1), "add_rows")
    return _make(out, (x, row), lambda g: (g, g.sum(axis=0).reshape(row.shape)), "add_rows")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def tensor_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    if n == 0:
        raise ValueError("mean of empty tensor")
    out = np.asarray(a.data.sum() / n)
    return _make(out, (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward, "concat")


def columns(a, start: int, stop: int) -> Tensor:
    """Column slice a[:, start:stop]."""
    a = as_tensor(a)
    out = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (a,), backward, "columns")


def _as_index(idx, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows")
    return idx


def gather(src, idx) -> Tensor:
    """Row selection src[idx]; backward scatter-adds into the source rows."""
    src = as_tensor(src)
    n = src.shape[0]
    idx = _as_index(idx, n, "gather")
    out = src.data[idx]

    def backward(g):
        full = np.zeros(src.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (src,), backward, "gather")


def scatter_add(src, idx, n: int) -> Tensor:
    """out[idx[e]] += src[e]; the adjoint of ``gather``."""
    src = as_tensor(src)
    idx = _as_index(idx, n, "scatter_add")
    if idx.size != src.shape[0]:
        raise ValueError("scatter_add: index length must match source rows")
    out = np.zeros((n,) + src.shape[1:])
    np.add.at(out, idx, src.data)
    return _make(out, (src,), lambda g: (g[idx],), "scatter_add")


def segment_softmax(logits, segments) -> Tensor:
    """Softmax of a 1-D tensor normalised independently within each segment id."""
    logits = as_tensor(logits)
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    if logits.ndim != 1 or seg.size != logits.size:
        raise ValueError("segment_softmax: logits must be 1-D and match segments")
    if seg.size == 0:
        return _make(np.zeros(0), (logits,), lambda g: (np.zeros(0),), "segment_softmax")
    if seg.min() < 0:
        raise IndexError("segment_softmax: negative segment id")
    nseg = int(seg.max()) + 1
    seg_max = np.full(nseg, -np.inf)
    np.maximum.at(seg_max, seg, logits.data)
    e = np.exp(logits.data - seg_max[seg])
    denom = np.zeros(nseg)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def backward(g):
        dot = np.zeros(nseg)
        np.add.at(dot, seg, g * out)
        return (out * (g - dot[seg]),)

    return _make(out, (logits,), backward, "segment_softmax")


# ---------------------------------------------------------------------------
# gradient routing
# ---------------------------------------------------------------------------

def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data.copy(), op="stop_gradient")


def custom_grad(forward_value, surrogate) -> Tensor:
    """Forward as ``forward_value``; backward routes everything into ``surrogate``.

    Same as ``surrogate + sg(forward_value - surrogate)`` but without the
    rounding of the add/subtract round trip, so the forward is exact.
    """
    fv, sur = as_tensor(forward_value), as_tensor(surrogate)
    if fv.shape != sur.shape:
        raise ValueError(f"custom_grad: shape mismatch {fv.shape} vs {sur.shape}")
    return _make(fv.data.copy(), (sur,), lambda g: (g,), "custom_grad")


def function(forward: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register an externally computed op (e.g. the rasterizer) in the graph.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    return _make(_finite(np.asarray(forward, dtype=np.float64), op), tuple(inputs), backward, op)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class FDReport:
    max_rel_err: list[float]
    tol_rel: float
    checked: list[int] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol_rel


def fd_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol_rel: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> FDReport:
    """Compare backward gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current values of ``params`` on
    every call. ``max_entries`` subsamples coordinates per parameter.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ValueError("fd_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    errs, counts = [], []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            vals = []
            for step in (h, -h):
                flat[i] = orig + step
                try:
                    v = float(f().data)
                except FloatingPointError as exc:
                    flat[i] = orig
                    raise FloatingPointError(f"fd_check: parameter {pi} entry {i}: {exc}") from exc
                if not np.isfinite(v):
                    flat[i] = orig
                    raise FloatingPointError(f"fd_check: non-finite value at parameter {pi} entry {i}")
                vals.append(v)
            flat[i] = orig
            num = (vals[0] - vals[1]) / (2 * h)
            a = analytic[pi].reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, rel)
        errs.append(worst)
        counts.append(len(idx))
    return FDReport(errs, tol_rel, counts)
