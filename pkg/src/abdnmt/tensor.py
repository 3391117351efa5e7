"""Dense 2-D tensors with reverse-mode gradients.

Everything in this package computes on row-major matrices: a batch of
vectors is a matrix whose rows are the batch items.  Tensor2 wraps a numpy
array and, while gradients are enabled, records enough of the computation
graph that ``backward()`` on a scalar loss fills the ``grad`` arrays of
every parameter it touched.

Precision is a process-wide switch: float32 for training and inference,
float64 for finite-difference gradient checking (see ``precision``).
Constructed tensors pick up the active dtype; operations preserve the
dtype of their operands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError, NumericError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True


def set_precision(name: str) -> None:
    """Switch the dtype used for newly created tensors ("float32"/"float64")."""
    global _dtype
    if name not in _DTYPES:
        raise InputError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_precision() -> str:
    return "float32" if _dtype == np.float32 else "float64"


def current_dtype():
    return _dtype


class precision:
    """Context manager scoping the creation dtype, e.g. ``with precision("float64"):``."""

    def __init__(self, name: str):
        self.name = name
        self._saved = None

    def __enter__(self):
        self._saved = get_precision()
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that stops graph recording (decode/eval paths)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor2:
    """A rows x cols matrix, optionally a node in the gradient tape.

    ``data`` is the numpy payload, ``grad`` an array of the same shape
    once backward has reached this node.  Leaf tensors with
    ``requires_grad=True`` are parameters; everything else derives its
    flag from its parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 needs a 2-D array, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backprop = None

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Tensor2":
        return cls(np.zeros((rows, cols), dtype=_dtype))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a {self.rows}x{self.cols} tensor")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor2":
        """A view of the same values, severed from the tape."""
        return Tensor2(self.data)

    def backward(self) -> None:
        """Reverse-accumulate gradients from this node into every reachable leaf."""
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)
                if node._parents:
                    node.grad = None  # free intermediate grads, keep leaves

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor2):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor2({self.rows}x{self.cols}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _accum(t: Tensor2, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


_EMPTY = ()


def _raw(arr: np.ndarray) -> Tensor2:
    """Internal fast constructor: ops guarantee a fresh 2-D float array."""
    t = object.__new__(Tensor2)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t._parents = _EMPTY
    t._backprop = None
    return t


def _make(data: np.ndarray, parents, backprop) -> Tensor2:
    out = _raw(data)
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backprop = backprop
                break
    return out


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    """Matrix product (m x k) @ (k x n) -> (m x n)."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims disagree, {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    y = a.data @ b.data

    def bp(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(y, (a, b), bp)


def add_n(ts) -> Tensor2:
    """Sum of tensors; (1 x n) operands broadcast over rows (bias rows)."""
    ts = list(ts)
    base = max(ts, key=lambda t: t.rows)
    for t in ts:
        if t.cols != base.cols or (t.rows != base.rows and t.rows != 1):
            raise ShapeError(f"add: incompatible shapes {t.rows}x{t.cols} vs {base.rows}x{base.cols}")
    y = ts[0].data
    for t in ts[1:]:
        y = y + t.data

    def bp(g):
        for t in ts:
            if t.rows == base.rows:
                _accum(t, g)
            else:
                _accum(t, g.sum(axis=0, keepdims=True))

    return _make(y, ts, bp)


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    return add_n((a, b))


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.rows}x{a.cols} vs {b.rows}x{b.cols}")
    y = a.data - b.data

    def bp(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(y, (a, b), bp)


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.rows}x{a.cols} vs {b.rows}x{b.cols}")
    y = a.data * b.data

    def bp(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(y, (a, b), bp)


def scale(t: Tensor2, k: float) -> Tensor2:
    k = float(k)
    y = t.data * k

    def bp(g):
        _accum(t, g * k)

    return _make(y, (t,), bp)


def mul_const(t: Tensor2, arr: np.ndarray) -> Tensor2:
    """Elementwise product with a constant array (dropout masks, step masks)."""
    arr = np.asarray(arr, dtype=t.data.dtype)
    y = t.data * arr

    def bp(g):
        _accum(t, g * arr)

    return _make(y, (t,), bp)


def scale_rows(t: Tensor2, col) -> Tensor2:
    """Scale row i of ``t`` by ``col[i]``; ``col`` is (m x 1), tensor or constant."""
    if isinstance(col, Tensor2):
        c = col.data
        if c.shape != (t.rows, 1):
            raise ShapeError(f"scale_rows: column {col.rows}x{col.cols} for {t.rows}x{t.cols}")
        y = t.data * c

        def bp(g):
            _accum(t, g * c)
            _accum(col, (g * t.data).sum(axis=1, keepdims=True))

        return _make(y, (t, col), bp)
    c = np.asarray(col, dtype=t.data.dtype).reshape(t.rows, 1)
    return mul_const(t, c)


def tanh(t: Tensor2) -> Tensor2:
    y = np.tanh(t.data)

    def bp(g):
        _accum(t, g * (1.0 - y * y))

    return _make(y, (t,), bp)


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow on large |x|
    z = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + z)
    return np.where(x >= 0, pos, 1.0 - pos)


def sigmoid(t: Tensor2) -> Tensor2:
    y = _sigmoid_arr(t.data)

    def bp(g):
        _accum(t, g * y * (1.0 - y))

    return _make(y, (t,), bp)


def concat_cols(ts) -> Tensor2:
    """Concatenate along columns: [(m x a), (m x b), ...] -> (m x a+b+...)."""
    ts = list(ts)
    rows = ts[0].rows
    for t in ts:
        if t.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ ({[x.rows for x in ts]})")
    y = np.concatenate([t.data for t in ts], axis=1)
    offs = np.cumsum([0] + [t.cols for t in ts])

    def bp(g):
        for t, a, b in zip(ts, offs[:-1], offs[1:]):
            _accum(t, g[:, a:b])

    return _make(y, ts, bp)


def stack_steps(steps) -> Tensor2:
    """Interleave T step matrices (B x D) into block layout (B*T x D).

    Row b*T + t of the result is row b of step t, the memory layout the
    attention ops expect (one contiguous block of T rows per batch item).
    """
    steps = list(steps)
    b, d = steps[0].shape
    tlen = len(steps)
    y = np.stack([s.data for s in steps], axis=1).reshape(b * tlen, d)

    def bp(g):
        gg = g.reshape(b, tlen, d)
        for t, s in enumerate(steps):
            _accum(s, gg[:, t, :])

    return _make(y, steps, bp)


def repeat_rows(t: Tensor2, n: int) -> Tensor2:
    """(m x d) -> (m*n x d) with each row repeated n times consecutively."""
    m, d = t.shape
    y = np.repeat(t.data, n, axis=0)

    def bp(g):
        _accum(t, g.reshape(m, n, d).sum(axis=1))

    return _make(y, (t,), bp)


def sum_blocks(t: Tensor2, n: int) -> Tensor2:
    """Sum consecutive blocks of n rows: (m*n x d) -> (m x d)."""
    if t.rows % n:
        raise ShapeError(f"sum_blocks: {t.rows} rows not divisible by block {n}")
    m = t.rows // n
    y = t.data.reshape(m, n, t.cols).sum(axis=1)

    def bp(g):
        _accum(t, np.repeat(g, n, axis=0))

    return _make(y, (t,), bp)


def reshape(t: Tensor2, rows: int, cols: int) -> Tensor2:
    if rows * cols != t.rows * t.cols:
        raise ShapeError(f"reshape: {t.rows}x{t.cols} -> {rows}x{cols}")
    y = t.data.reshape(rows, cols)
    shape = t.shape

    def bp(g):
        _accum(t, g.reshape(shape))

    return _make(y, (t,), bp)


def masked_softmax(scores: Tensor2, mask) -> Tensor2:
    """Row-wise softmax over unmasked positions; masked entries are exactly 0.

    ``mask`` is a constant boolean array of the same shape.  Max-subtraction
    runs over the unmasked entries only, so masked scores never enter the
    normalization at all.
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask {m.shape} vs scores {scores.shape}")
    if not m.any(axis=1).all():
        raise DomainError("masked_softmax: some row has every position masked")
    x = scores.data
    neg = np.finfo(x.dtype).min
    rowmax = np.where(m, x, neg).max(axis=1, keepdims=True)
    e = np.where(m, np.exp(np.where(m, x - rowmax, 0.0)), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bp(g):
        dot = (p * g).sum(axis=1, keepdims=True)
        _accum(scores, p * (g - dot))

    return _make(p, (scores,), bp)


def log_softmax(t: Tensor2) -> Tensor2:
    """Row-wise log-softmax; rows of the result logsumexp to 0."""
    x = t.data
    shifted = x - x.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bp(g):
        _accum(t, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _make(y, (t,), bp)


def gather_rows(t: Tensor2, ids) -> Tensor2:
    """Select rows by index: (n x d) table, k ids -> (k x d)."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= t.rows):
        raise IndexError(f"gather_rows: id out of range 0..{t.rows - 1}")
    y = t.data[idx]

    def bp(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add.at(t.grad, idx, g)

    return _make(y, (t,), bp)


def gather_cols(t: Tensor2, ids) -> Tensor2:
    """Per-row element pick: result[i, 0] = t[i, ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size != t.rows:
        raise ShapeError(f"gather_cols: {idx.size} ids for {t.rows} rows")
    rows = np.arange(t.rows)
    y = t.data[rows, idx].reshape(t.rows, 1)

    def bp(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add.at(t.grad, (rows, idx), g[:, 0])

    return _make(y, (t,), bp)


def sum_all(t: Tensor2) -> Tensor2:
    """Sum of all entries as a 1x1 tensor."""
    y = np.array([[t.data.sum()]], dtype=t.data.dtype)

    def bp(g):
        _accum(t, np.broadcast_to(g, t.shape) * np.ones_like(t.data))

    return _make(y, (t,), bp)


# ---------------------------------------------------------------------------
# Parameters


class Param:
    """A named value tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "value", "group")

    def __init__(self, name: str, value: Tensor2, group: str = "shared"):
        self.name = name
        self.value = value
        self.group = group
        value.requires_grad = True
        if value.grad is None:
            value.grad = np.zeros_like(value.data)

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, {self.value.rows}x{self.value.cols}, group={self.group!r})"


class ParamStore:
    """Ordered collection of named parameters grouped by model component.

    Iteration order is the insertion order and doubles as the checkpoint
    manifest order, so it must stay deterministic.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data, group: str = "shared") -> Tensor2:
        if name in self._params:
            raise InputError(f"duplicate parameter name {name!r}")
        value = data if isinstance(data, Tensor2) else Tensor2(data)
        self._params[name] = Param(name, value, group)
        return value

    def get(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def in_group(self, *groups):
        return [p for p in self if p.group in groups]

    def zero_grads(self) -> None:
        for p in self:
            p.value.grad = np.zeros_like(p.value.data)

    def total_entries(self) -> int:
        return sum(p.value.data.size for p in self)

    def dtype(self):
        return next(iter(self)).value.data.dtype


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for p in store:
        g = p.grad
        s = float(np.dot(g.ravel(), g.ravel()))
        if not math.isfinite(s):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        total += s
    return math.sqrt(total)


def clip_global_norm(store: ParamStore, c: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most c; returns the factor."""
    if c <= 0:
        raise InputError(f"clip threshold must be positive, got {c}")
    norm = global_grad_norm(store)
    if norm <= c or norm == 0.0:
        return 1.0
    factor = c / norm
    for p in store:
        p.value.grad *= factor
    return factor


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckFailure:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    checked: int = 0
    tol: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"gradient check: {self.checked} entries, worst rel err {self.worst:.3e}, tol {self.tol:.1e}"]
        for f in self.failures:
            lines.append(
                f"  FAIL {f.param}{list(f.index)}: analytic {f.analytic:.6e} vs numeric {f.numeric:.6e} (rel {f.rel_err:.3e})"
            )
        return "\n".join(lines)


def check_gradients(
    loss_fn,
    store: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    full_below: int = 256,
    sample_per_param: int = 64,
    analytic_scale: float = 1.0,
) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn(store)`` with central differences.

    Parameters with at most ``full_below`` entries are checked exhaustively,
    larger ones at ``sample_per_param`` seeded-random entries.  Relative
    error is |a - n| / max(|a|, |n|, 1e-8).

    An entry that exceeds the tolerance is re-measured at 5x and 25x the
    step and the best agreement kept: near-zero gradients are dominated by
    cancellation roundoff, which shrinks linearly with the step, whereas a
    genuine backprop error reproduces at any step, so the retries rescue
    noise-limited entries without hiding real bugs.

    ``analytic_scale`` is a self-test knob: any value other than 1.0 must
    make the check fail.  Requires a float64 store; float32 has no headroom
    for the differences.
    """
    if store.dtype() != np.float64:
        raise InputError("check_gradients requires a float64 ParamStore (use precision('float64'))")
    store.zero_grads()
    loss = loss_fn(store)
    loss.backward()
    analytic = {p.name: p.grad.copy() * analytic_scale for p in store}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)

    def f() -> float:
        with no_grad():
            return loss_fn(store).item()

    def central(p, i, j, step) -> float:
        orig = p.value.data[i, j]
        p.value.data[i, j] = orig + step
        f1 = f()
        p.value.data[i, j] = orig - step
        f2 = f()
        p.value.data[i, j] = orig
        return (f1 - f2) / (2.0 * step)

    for p in store:
        rows, cols = p.shape
        size = rows * cols
        if size <= full_below:
            flat = np.arange(size)
        else:
            flat = rng.choice(size, size=sample_per_param, replace=False)
        worst = 0.0
        for k in flat:
            i, j = divmod(int(k), cols)
            a = float(analytic[p.name][i, j])
            best_rel, best_numeric = math.inf, math.nan
            for step in (eps, 5 * eps, 25 * eps):
                numeric = central(p, i, j, step)
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel < best_rel:
                    best_rel, best_numeric = rel, numeric
                if best_rel <= tol:
                    break
            worst = max(worst, best_rel)
            report.checked += 1
            if best_rel > tol:
                report.failures.append(GradCheckFailure(p.name, (i, j), a, best_numeric, best_rel))
        report.max_rel_err[p.name] = worst
    return report
