"""Small reverse-mode differentiation kernel over dense numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  A tape can be
differentiated any number of times; each call to :meth:`Tape.gradient`
starts from fresh accumulators, so repeated backward passes agree bit for bit.

Shape rules are deliberately strict: elementwise ops need equal shapes and
the only mixed-shape product is matrix times vector.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "ColumnPool",
    "KinkMonitor",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "clip",
    "columnwise_dot",
    "concat_rows",
    "constant",
    "frobenius_sq",
    "gather_columns",
    "inner_product",
    "kink_monitor",
    "log",
    "matmul",
    "max_pool",
    "mean_pool",
    "mul",
    "pool_columns",
    "relu",
    "scale",
    "sigmoid",
    "stack_columns",
    "sub",
    "total",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A value node.  Leaves with ``requires_grad`` are trainable sources."""

    __slots__ = ("value", "requires_grad", "name", "parents", "backward_fn")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite value in tensor {name or ''}".strip())
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    _active: list[Tape] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> Tape:
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each source.

        Sources that ``target`` does not depend on get a zero array.
        """
        if target.value.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def _record(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = ()
    out.backward_fn = None
    if out.requires_grad and Tape._active:
        out.parents = parents
        out.backward_fn = backward_fn
        Tape._active[-1].nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# non-differentiability monitor (used by gradient checks to reject instances
# sitting too close to a ReLU hinge, a max tie, or a clip boundary)


class KinkMonitor:
    def __init__(self):
        self.margin = math.inf

    def report(self, distance: float) -> None:
        if distance < self.margin:
            self.margin = float(distance)


_monitors: list[KinkMonitor] = []


@contextlib.contextmanager
def kink_monitor():
    mon = KinkMonitor()
    _monitors.append(mon)
    try:
        yield mon
    finally:
        _monitors.remove(mon)


def _report_kink(distances: np.ndarray) -> None:
    if _monitors and distances.size:
        d = float(np.min(distances))
        for mon in _monitors:
            mon.report(d)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``b`` may be a vector (matrix times vector)."""
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _same_shape("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _same_shape("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    x = constant(x)
    c = float(c)
    return _record(x.value * c, (x,), lambda g: (g * c,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    x = constant(x)
    shape = x.shape
    return _record(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.value.dtype),))


def inner_product(u: Tensor, v: Tensor) -> Tensor:
    u, v = constant(u), constant(v)
    if u.value.ndim != 1:
        raise ShapeError(f"inner_product expects vectors, got {u.shape}")
    _same_shape("inner_product", u, v)
    uv, vv = u.value, v.value
    return _record(np.asarray(uv @ vv), (u, v), lambda g: (g * vv, g * uv))


def columnwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of matching columns: (D, B), (D, B) -> (B,)."""
    a, b = constant(a), constant(b)
    _same_shape("columnwise_dot", a, b)
    if a.value.ndim != 2:
        raise ShapeError(f"columnwise_dot expects matrices, got {a.shape}")
    av, bv = a.value, b.value
    return _record(np.einsum("db,db->b", av, bv), (a, b), lambda g: (bv * g, av * g))


def frobenius_sq(x: Tensor) -> Tensor:
    x = constant(x)
    xv = x.value
    return _record(np.asarray(np.sum(xv * xv)), (x,), lambda g: (2.0 * g * xv,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x: Tensor) -> Tensor:
    x = constant(x)
    xv = x.value
    if _monitors:
        # an exact zero is a product with a zero vector and stays zero under
        # small perturbations, so it is not a hinge crossing
        _report_kink(np.abs(xv[xv != 0]))
    mask = xv > 0
    return _record(np.where(mask, xv, 0.0).astype(xv.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(xv: np.ndarray) -> np.ndarray:
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ez = np.exp(xv[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = constant(x)
    s = _sigmoid(np.atleast_1d(x.value)).reshape(x.shape)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    x = constant(x)
    xv = x.value
    if np.any(xv <= 0):
        raise ValueError("log of non-positive value; clamp the argument first")
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only strictly inside the interval."""
    x = constant(x)
    xv = x.value
    if _monitors:
        _report_kink(np.minimum(np.abs(xv - lo), np.abs(xv - hi)))
    inside = (xv > lo) & (xv < hi)
    return _record(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# indexing and stacking


def gather_columns(x: Tensor, index) -> Tensor:
    """Columns ``x[:, index]``; repeated indices accumulate in backward."""
    x = constant(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.value.ndim != 2:
        raise ShapeError(f"gather_columns expects a matrix, got {x.shape}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _record(x.value[:, idx], (x,), backward)


def stack_columns(vectors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors as the columns of a matrix."""
    vs = [constant(v) for v in vectors]
    if not vs:
        raise ShapeError("stack_columns needs at least one vector")
    d = vs[0].shape
    if len(d) != 1 or any(v.shape != d for v in vs):
        raise ShapeError("stack_columns needs equal-length vectors")
    return _record(
        np.stack([v.value for v in vs], axis=1),
        tuple(vs),
        lambda g: tuple(g[:, k] for k in range(g.shape[1])),
    )


def concat_rows(blocks: Sequence[Tensor]) -> Tensor:
    """Vertical concatenation of matrices with the same column count."""
    bs = [constant(b) for b in blocks]
    if any(b.value.ndim != 2 for b in bs) or len({b.shape[1] for b in bs}) != 1:
        raise ShapeError("concat_rows needs matrices with equal column counts")
    splits = np.cumsum([b.shape[0] for b in bs])[:-1]
    return _record(
        np.concatenate([b.value for b in bs], axis=0),
        tuple(bs),
        lambda g: tuple(np.split(g, splits, axis=0)),
    )


# ---------------------------------------------------------------------------
# pooling


class ColumnPool:
    """Reusable pooling of matrix columns by fixed index groups.

    Maps (D, n) to (D, len(groups)).  An empty group pools to the zero
    vector.  Max pooling routes the gradient to the first (lowest-position)
    maximal entry of each group.
    """

    def __init__(self, groups: Sequence[Iterable[int]], n: int, mode: str = "mean"):
        if mode not in ("mean", "max"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.n = n
        self.groups = [np.asarray(g if isinstance(g, np.ndarray) else list(g), dtype=np.int64) for g in groups]
        for g in self.groups:
            if g.size and (g.min() < 0 or g.max() >= n):
                raise ShapeError(f"pool group index out of range [0, {n})")
        self.nonempty = np.array([g.size > 0 for g in self.groups], dtype=bool)
        if mode == "mean":
            avg = np.zeros((n, len(self.groups)))
            for col, g in enumerate(self.groups):
                if g.size:
                    np.add.at(avg[:, col], g, 1.0 / g.size)
            self.avg = avg

    def __call__(self, x: Tensor) -> Tensor:
        x = constant(x)
        if x.value.ndim != 2 or x.shape[1] != self.n:
            raise ShapeError(f"pool expects a (D, {self.n}) matrix, got {x.shape}")
        if self.mode == "mean":
            avg = self.avg.astype(x.value.dtype, copy=False)
            return _record(x.value @ avg, (x,), lambda grad: (grad @ avg.T,))
        return self._max(x)

    def _max(self, x: Tensor) -> Tensor:
        xv = x.value
        d, n = xv.shape
        m = len(self.groups)
        out = np.zeros((d, m), dtype=xv.dtype)
        winners = np.zeros((d, m), dtype=np.int64)
        gaps = []
        for col, g in enumerate(self.groups):
            if not g.size:
                continue
            block = xv[:, g]
            arg = np.argmax(block, axis=1)
            winners[:, col] = g[arg]
            out[:, col] = block[np.arange(d), arg]
            if g.size > 1 and _monitors:
                top2 = np.sort(block, axis=1)[:, -2:]
                live = top2[:, 1] != 0  # ties among clamped zeros carry no gradient
                gaps.append((top2[:, 1] - top2[:, 0])[live])
        if gaps:
            _report_kink(np.concatenate(gaps))
        sel = np.broadcast_to(self.nonempty, (d, m))
        rows = np.broadcast_to(np.arange(d)[:, None], (d, m))

        def backward(grad):
            gx = np.zeros((d, n), dtype=grad.dtype)
            np.add.at(gx, (rows[sel], winners[sel]), grad[sel])
            return (gx,)

        return _record(out, (x,), backward)


def pool_columns(x: Tensor, groups: Sequence[Iterable[int]], mode: str = "mean") -> Tensor:
    """One-off :class:`ColumnPool` application."""
    x = constant(x)
    return ColumnPool(groups, x.shape[1], mode)(x)


def mean_pool(vectors: Sequence[Tensor]) -> Tensor:
    if not vectors:
        raise ShapeError("mean_pool of an empty list; use the zero-vector convention")
    stacked = stack_columns(vectors)
    return _column(pool_columns(stacked, [range(len(vectors))], "mean"))


def max_pool(vectors: Sequence[Tensor]) -> Tensor:
    if not vectors:
        raise ShapeError("max_pool of an empty list; use the zero-vector convention")
    stacked = stack_columns(vectors)
    return _column(pool_columns(stacked, [range(len(vectors))], "max"))


def _column(x: Tensor) -> Tensor:
    return _record(x.value[:, 0], (x,), lambda g: (g[:, None],))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a dict of named numpy parameters.

    Parameters are updated in place.  Moments are created lazily per name.
    """

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise FloatingPointError(f"non-finite gradient for parameter {name!r} ({bad} entries)")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()}, "v": {k: a.copy() for k, a in self.v.items()}}
