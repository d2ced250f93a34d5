"""Define-by-run reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to tracked tensors. Tensors that
are not tracked behave as constants, so the same model code runs with or
without gradient recording.

Elementwise binary primitives require operands of identical shape; the only
implicit broadcasting is by a Python scalar. Use :func:`broadcast_to` to expand
explicitly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse

ACOS_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tape:
    """Ordered record of primitive applications.

    Entry ``n`` holds ``(inputs, vjp)`` where ``vjp`` maps the adjoint of the
    result to a tuple of adjoints for ``inputs``. Leaves are entries with no
    inputs.
    """

    def __init__(self) -> None:
        self.entries: list[tuple[tuple["Tensor", ...], Callable | None]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(value)
        t.tape = self
        t.node = len(self.entries)
        t.name = name
        self.entries.append(((), None))
        return t

    def _record(self, value: np.ndarray, inputs, vjp) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.value = value
        t.tape = self
        t.node = len(self.entries)
        t.name = None
        self.entries.append((inputs, vjp))
        return t

    def gradient(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        return backward(self, loss, wrt)


class Tensor:
    __slots__ = ("value", "tape", "node", "name")
    __array_priority__ = 1000

    def __init__(self, value) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.tape: Tape | None = None
        self.node = -1
        self.name: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        flag = "tracked" if self.tracked else "const"
        return f"Tensor(shape={self.shape}, {flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Segments:
    """Precomputed scatter for a fixed index array.

    ``ids[k]`` names the bucket of row ``k``; :meth:`sum` adds rows into
    ``n`` buckets with a sparse product, much faster than ``np.add.at``.
    """

    def __init__(self, ids, n: int, rows=None):
        self.ids = np.asarray(ids, dtype=np.intp)
        self.n = int(n)
        if self.ids.ndim != 1:
            raise ShapeError("segment ids must be one-dimensional")
        if len(self.ids) and (self.ids.min() < 0 or self.ids.max() >= self.n):
            raise ShapeError("segment id out of range")
        k = len(self.ids)
        # ``rows`` (bool mask) restricts the sum to a subset of rows
        self.partial = rows is not None
        cols = np.arange(k) if rows is None else np.flatnonzero(rows)
        self.matrix = sparse.csr_matrix((np.ones(len(cols)), (self.ids[cols], cols)), shape=(self.n, k))

    def __len__(self) -> int:
        return len(self.ids)

    def sum(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != len(self.ids):
            raise ShapeError(f"segment sum: {len(self.ids)} ids for {x.shape[0]} rows")
        flat = x.reshape(len(self.ids), int(np.prod(x.shape[1:], dtype=np.intp)))
        return np.asarray(self.matrix @ flat).reshape((self.n,) + x.shape[1:])


def _scatter(index, g: np.ndarray, shape) -> np.ndarray:
    if isinstance(index, Segments) and index.n == shape[0] and not index.partial:
        return index.sum(g)
    out = np.zeros(shape)
    np.add.at(out, index.ids if isinstance(index, Segments) else index, g)
    return out


def custom_op(op: str, value: np.ndarray, inputs: Sequence, vjp) -> Tensor:
    """Record a fused primitive with a hand-written vector-Jacobian product."""
    return _emit(op, np.asarray(value, dtype=np.float64), tuple(as_tensor(x) for x in inputs), vjp)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return value


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check(value, op)
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError(f"{op}: operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return Tensor(value)
    return tape._record(value, inputs, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        return _emit("add", a.value + b, (a,), lambda g: (g,))
    if np.isscalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        return _emit("sub", a.value - b, (a,), lambda g: (g,))
    if np.isscalar(a):
        b = as_tensor(b)
        return _emit("sub", a - b.value, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        return scale(a, b)
    if np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    if np.isscalar(b):
        return scale(a, 1.0 / b)
    if np.isscalar(a):
        b = as_tensor(b)
        out = a / b.value
        return _emit("div", out, (b,), lambda g: (-g * out / b.value,))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    bv = b.value
    with np.errstate(divide="ignore", invalid="ignore"):  # _emit raises on non-finite output
        out = a.value / bv
    return _emit("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def acos_clamped(a, eps: float = ACOS_EPS) -> Tensor:
    """acos with the argument clamped to [-1+eps, 1-eps]; derivative taken at the clamped point."""
    a = as_tensor(a)
    c = np.clip(a.value, -1.0 + eps, 1.0 - eps)
    d = -1.0 / np.sqrt(1.0 - c * c)
    return _emit("acos_clamped", np.arccos(c), (a,), lambda g: (g * d,))


# ----------------------------------------------------------------------------
# structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {av.shape} vs {bv.shape}")
    if av.ndim == 2 and bv.ndim > 2:
        raise ShapeError("matmul: left operand must carry the batch dims")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), vjp)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(xs), vjp)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    n = len(xs)

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(n))

    return _emit("stack", out, tuple(xs), vjp)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit("slice", np.array(a.value[key]), (a,), vjp)


def take_rows(a, index) -> Tensor:
    """Gather along axis 0 (rows may repeat); ``index`` may be a :class:`Segments`."""
    a = as_tensor(a)
    ids = index.ids if isinstance(index, Segments) else np.asarray(index, dtype=np.intp)
    shape = a.shape
    return _emit("take_rows", a.value[ids], (a,), lambda g: (_scatter(index, g, shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    if len(old) != len(shape):
        raise ShapeError(f"broadcast_to: rank {len(old)} vs {len(shape)}; reshape first")
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {exc}") from None
    axes = tuple(i for i, (o, n) in enumerate(zip(old, shape)) if o == 1 and n != 1)

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit("broadcast_to", out, (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    a = as_tensor(a)
    ids = segment_ids.ids if isinstance(segment_ids, Segments) else np.asarray(segment_ids, dtype=np.intp)
    if ids.shape != a.shape[:1]:
        raise ShapeError(f"segment_sum: {ids.shape[0]} ids for {a.shape[0]} rows")
    out = _scatter(segment_ids, a.value, (num_segments,) + a.shape[1:])
    return _emit("segment_sum", out, (a,), lambda g: (g[ids],))


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", p, (a,), vjp)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_rows", out, (a,), vjp)


def segment_softmax(a, segment_ids, num_segments: int) -> Tensor:
    """Softmax of rows of ``a`` within each segment, independently per column.

    Rows sharing a segment id are normalized together; used for attention over
    the incoming edges of each node.
    """
    a = as_tensor(a)
    ids = segment_ids.ids if isinstance(segment_ids, Segments) else np.asarray(segment_ids, dtype=np.intp)
    av = a.value
    shape = (num_segments,) + av.shape[1:]
    mx = np.full(shape, -np.inf)
    np.maximum.at(mx, ids, av)
    e = np.exp(av - mx[ids])
    p = e / _scatter(segment_ids, e, shape)[ids]

    def vjp(g):
        gp = g * p
        return (gp - p * _scatter(segment_ids, gp, shape)[ids],)

    return _emit("segment_softmax", p, (a,), vjp)


def norm_rows(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm over the last axis, keeping it as size 1.

    With ``eps > 0`` computes ``sqrt(|x|^2 + eps)``, smooth at the origin.
    At an exact zero with ``eps == 0`` the derivative is taken as zero.
    """
    a = as_tensor(a)
    av = a.value
    out = np.sqrt((av * av).sum(axis=-1, keepdims=True) + eps)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, av / out, 0.0)
        return (g * d,)

    return _emit("norm_rows", out, (a,), vjp)


def normalize_rows(a, eps: float = 0.0) -> Tensor:
    """``x / sqrt(|x|^2 + eps)`` over the last axis."""
    a = as_tensor(a)
    av = a.value
    n = np.sqrt((av * av).sum(axis=-1, keepdims=True) + eps)
    if eps == 0.0 and (n == 0).any():
        raise NonFiniteError("normalize_rows: zero-length row")
    out = av / n

    def vjp(g):
        # I/n - x x^T / n^3, valid for any eps
        return (g / n - av * (g * av).sum(axis=-1, keepdims=True) / n**3,)

    return _emit("normalize_rows", out, (a,), vjp)


def cross3(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("cross3", a, b)
    if a.shape[-1] != 3:
        raise ShapeError(f"cross3: last axis must be 3, got {a.shape}")
    av, bv = a.value, b.value
    return _emit(
        "cross3",
        np.cross(av, bv),
        (a, b),
        lambda g: (np.cross(bv, g), np.cross(g, av)),
    )


# ----------------------------------------------------------------------------
# backward pass and checks

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "segment_sum": segment_sum,
    "softmax_rows": softmax_rows,
    "exp": exp,
    "log": log,
    "cos": cos,
    "sin": sin,
    "acos_clamped": acos_clamped,
    "sqrt": sqrt,
    "norm_rows": norm_rows,
    "cross3": cross3,
    "scale": scale,
    # extensions used by the model
    "tanh": tanh,
    "take_rows": take_rows,
    "stack": stack,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "log_softmax_rows": log_softmax_rows,
    "segment_softmax": segment_softmax,
    "normalize_rows": normalize_rows,
}


def apply_primitive(op_kind: str, *operands, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*operands, **kwargs)


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Adjoints of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that the loss does not depend on get zero arrays.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("gradient requested for a tensor not on this tape")
    keep = {w.node for w in wrt}
    adj: list[np.ndarray | None] = [None] * (loss.node + 1)
    adj[loss.node] = np.ones_like(loss.value)
    entries = tape.entries
    for n in range(loss.node, -1, -1):
        g = adj[n]
        if g is None:
            continue
        inputs, vjp = entries[n]
        if vjp is None:
            continue
        grads = vjp(g)
        for x, gx in zip(inputs, grads):
            if x.tape is None or gx is None:
                continue
            k = x.node
            if adj[k] is None:
                adj[k] = np.array(gx, dtype=np.float64, copy=True).reshape(x.shape)
            else:
                adj[k] += gx
        if n not in keep:
            adj[n] = None
    out = []
    for w in wrt:
        g = adj[w.node] if w.node < len(adj) else None
        out.append(np.zeros(w.shape) if g is None else g)
    return out


def value_and_grad(fn: Callable[..., Tensor], points: Sequence[np.ndarray]):
    """Evaluate scalar ``fn`` on fresh leaves and return ``(value, grads)``."""
    tape = Tape()
    leaves = [tape.leaf(np.array(p, dtype=np.float64)) for p in points]
    loss = fn(*leaves)
    if not loss.tracked:
        return float(loss.value), [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in points]
    return float(loss.value), backward(tape, loss, leaves)


def numeric_grad(fn: Callable[..., Tensor], points: Sequence[np.ndarray], step: float = 1e-5, which=None):
    """Central finite differences of scalar ``fn``.

    ``which`` optionally maps argument index to a list of flat component
    indices; unlisted components are left as NaN.
    """
    points = [np.array(p, dtype=np.float64) for p in points]
    out = []
    for k, p in enumerate(points):
        g = np.full(p.shape, np.nan)
        flat = p.reshape(-1)
        idx = range(flat.size) if which is None else which.get(k, [])
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(*[Tensor(q) for q in points]).value)
            flat[i] = orig - step
            fm = float(fn(*[Tensor(q) for q in points]).value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differencing")
            g.reshape(-1)[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / den


def grad_check(fn: Callable[..., Tensor], points, step: float = 1e-5, which=None) -> float:
    """Worst component-wise relative error between backward() and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(points, np.ndarray):
        points = [points]
    _, analytic = value_and_grad(fn, points)
    numeric = numeric_grad(fn, points, step, which)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if mask.any():
            worst = max(worst, float(relative_error(a[mask], n[mask]).max()))
    return worst
