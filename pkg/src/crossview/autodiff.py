"""Dense float64 tensors with reverse-mode differentiation on a per-step tape.

The graph is define-by-run: entering a ``Tape`` context makes it the active
tape, operations executed inside record themselves, and ``backward`` replays
the records once in reverse. Tapes are rebuilt every training step, so
parameter ``grad`` fields always hold the most recent step's gradient
(backward overwrites, it never accumulates across tapes).

Tapes and the tensors recorded on them are confined to one thread; distinct
threads get distinct active-tape stacks and may run concurrently.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_PROB_EPS = 1e-12

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked for differentiation.

    ``requires_grad`` marks trainable leaves; they are registered lazily on
    whichever tape is active when an operation first consumes them.
    ``node_id`` is only meaningful together with the tape that assigned it.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Untracked view sharing this tensor's values."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

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

    def __neg__(self):
        return scalar_mul(-1.0, self)


class Tape:
    """Ordered record of operations; consumed by a single backward pass."""

    def __init__(self):
        self._records: list[tuple[int, Callable]] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape context exited out of order")
        stack.pop()
        return False

    def _assign_id(self, t: Tensor) -> int:
        t._tape = self
        t.node_id = self._next_id
        self._next_id += 1
        return t.node_id

    def tracked_id(self, t: Tensor) -> Optional[int]:
        """Node id of ``t`` on this tape; registers requires-grad leaves lazily."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            nid = self._assign_id(t)
            self._leaves[nid] = t
            return nid
        return None

    def record(self, out: Tensor, backward_fn: Callable) -> None:
        oid = self._assign_id(out)
        self._records.append((oid, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tracked leaf from a scalar loss.

        The tape is consumed afterwards; calling backward twice without
        re-recording raises ``ContractError``. Leaves the loss does not
        reach get an exact-zero gradient.
        """
        if self._consumed:
            raise ContractError("tape already consumed; rebuild the graph before backward")
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        sink = grads  # closures accumulate through _accumulate below
        for oid, backward_fn in reversed(self._records):
            g = grads.pop(oid, None)
            if g is None:
                continue
            backward_fn(g, sink)
        for nid, leaf in self._leaves.items():
            acc = grads.get(nid)
            leaf.grad = np.zeros_like(leaf.data) if acc is None else np.asarray(acc)
        self._records.clear()


def _accumulate(sink: dict, nid: Optional[int], g) -> None:
    if nid is None:
        return
    held = sink.get(nid)
    # never mutate in place: incoming arrays may be shared between branches
    sink[nid] = g if held is None else held + g


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss._tape is None or loss.node_id is None:
        raise ContractError("loss is not on any tape (was it computed inside a Tape context?)")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_elemwise_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast is supported)")


def _fit_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    # undo scalar broadcast: collapse the gradient back to a size-1 operand
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _record_op(out: Tensor, inputs: Sequence[Tensor], make_backward) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    ids = [tape.tracked_id(t) for t in inputs]
    if all(i is None for i in ids):
        return out
    tape.record(out, make_backward(ids))
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction suite


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elemwise_shapes(a.data, b.data, "add")
    out = Tensor(a.data + b.data)
    ash, bsh = a.data.shape, b.data.shape

    def make(ids):
        aid, bid = ids

        def bwd(g, sink):
            _accumulate(sink, aid, _fit_shape(g, ash))
            _accumulate(sink, bid, _fit_shape(g, bsh))

        return bwd

    return _record_op(out, (a, b), make)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elemwise_shapes(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)
    ash, bsh = a.data.shape, b.data.shape

    def make(ids):
        aid, bid = ids

        def bwd(g, sink):
            _accumulate(sink, aid, _fit_shape(g, ash))
            _accumulate(sink, bid, _fit_shape(-g, bsh))

        return bwd

    return _record_op(out, (a, b), make)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elemwise_shapes(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)
    adata, bdata = a.data, b.data

    def make(ids):
        aid, bid = ids

        def bwd(g, sink):
            if aid is not None:
                _accumulate(sink, aid, _fit_shape(g * bdata, adata.shape))
            if bid is not None:
                _accumulate(sink, bid, _fit_shape(g * adata, bdata.shape))

        return bwd

    return _record_op(out, (a, b), make)


def scalar_mul(c: float, x: Tensor) -> Tensor:
    c = float(c)
    out = Tensor(c * x.data)

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, c * g)

        return bwd

    return _record_op(out, (x,), make)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError(f"log requires strictly positive inputs, min was {x.data.min()!r}")
    out = Tensor(np.log(x.data))
    xdata = x.data

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, g / xdata)

        return bwd

    return _record_op(out, (x,), make)


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    xdata = x.data

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, 2.0 * xdata * g)

        return bwd

    return _record_op(out, (x,), make)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError(f"sqrt requires nonnegative inputs, min was {x.data.min()!r}")
    root = np.sqrt(x.data)
    out = Tensor(root)

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, g / (2.0 * root))

        return bwd

    return _record_op(out, (x,), make)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp; gradient passes through inside [lo, hi], zero outside."""
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, g * mask)

        return bwd

    return _record_op(out, (x,), make)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0  # derivative at exactly 0 is taken as 0

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, g * mask)

        return bwd

    return _record_op(out, (x,), make)


def logistic(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)), branch-split on sign so large |x| cannot
    overflow, output clamped to [1e-12, 1-1e-12] so downstream logs stay finite."""
    t = np.exp(-np.abs(x.data))
    p = np.where(x.data >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    p = np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)
    out = Tensor(p)

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, g * p * (1.0 - p))

        return bwd

    return _record_op(out, (x,), make)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy's naming
    out = Tensor(np.sum(x.data))
    shape = x.data.shape

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, np.broadcast_to(g, shape).copy())

        return bwd

    return _record_op(out, (x,), make)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    out = Tensor(np.mean(x.data))
    shape = x.data.shape

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, np.broadcast_to(g / n, shape).copy())

        return bwd

    return _record_op(out, (x,), make)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    parts = [_as_tensor(p) for p in parts]
    ndim = parts[0].data.ndim
    ax = axis % ndim if ndim else 0
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise DimensionError(f"concat: rank mismatch {parts[0].data.shape} vs {p.data.shape}")
        for d in range(ndim):
            if d != ax and p.data.shape[d] != parts[0].data.shape[d]:
                raise DimensionError(
                    f"concat: shapes {parts[0].data.shape} and {p.data.shape} disagree off axis {ax}"
                )
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make(ids):
        def bwd(g, sink):
            for i, nid in enumerate(ids):
                if nid is not None:
                    sl = [slice(None)] * ndim
                    sl[ax] = slice(offsets[i], offsets[i + 1])
                    _accumulate(sink, nid, g[tuple(sl)])

        return bwd

    return _record_op(out, tuple(parts), make)


# ---------------------------------------------------------------------------
# linear algebra / structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.data.shape} and {b.data.shape} disagree")
    out = Tensor(a.data @ b.data)
    adata, bdata = a.data, b.data

    def make(ids):
        aid, bid = ids

        def bwd(g, sink):
            if aid is not None:
                _accumulate(sink, aid, g @ bdata.T)
            if bid is not None:
                _accumulate(sink, bid, adata.T @ g)

        return bwd

    return _record_op(out, (a, b), make)


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Add a length-c bias row to every row of an r-by-c matrix."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias: matrix {m.data.shape} does not take bias {b.data.shape}")
    out = Tensor(m.data + b.data)

    def make(ids):
        mid, bid = ids

        def bwd(g, sink):
            _accumulate(sink, mid, g)
            if bid is not None:
                _accumulate(sink, bid, g.sum(axis=0))

        return bwd

    return _record_op(out, (m, b), make)


def take(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0); duplicate indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"take expects a flat index array, got shape {idx.shape}")
    if x.data.ndim not in (1, 2):
        raise DimensionError(f"take supports 1-d/2-d tensors, got shape {x.data.shape}")
    out = Tensor(x.data[idx])
    shape = x.data.shape

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            z = np.zeros(shape)
            np.add.at(z, idx, g)
            _accumulate(sink, xid, z)

        return bwd

    return _record_op(out, (x,), make)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise DimensionError(f"reshape: {x.data.shape} has {x.data.size} values, target {shape} disagrees")
    out = Tensor(x.data.reshape(shape))
    old = x.data.shape

    def make(ids):
        (xid,) = ids

        def bwd(g, sink):
            _accumulate(sink, xid, g.reshape(old))

        return bwd

    return _record_op(out, (x,), make)


def euclidean_distance(u: Tensor, v: Tensor) -> Tensor:
    """||u - v||_2 of two equal-length vectors.

    At u == v the true subdifferential is a ball; the gradient is defined
    as exactly zero there so coincident positive pairs stay finite.
    """
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise DimensionError(f"euclidean_distance: lengths {u.data.shape} and {v.data.shape} differ")
    diff = u.data - v.data
    d = float(np.sqrt(np.dot(diff, diff)))
    out = Tensor(d)

    def make(ids):
        uid, vid = ids

        def bwd(g, sink):
            direction = np.zeros_like(diff) if d == 0.0 else diff / d
            _accumulate(sink, uid, float(g) * direction)
            _accumulate(sink, vid, -float(g) * direction)

        return bwd

    return _record_op(out, (u, v), make)


def pair_distances(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distances of two n-by-k matrices; zero-distance rows
    get zero gradient, matching ``euclidean_distance``."""
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise DimensionError(f"pair_distances: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    out = Tensor(d)

    def make(ids):
        aid, bid = ids

        def bwd(g, sink):
            safe = np.where(d == 0.0, 1.0, d)
            scale = np.where(d == 0.0, 0.0, g / safe)
            full = diff * scale[:, None]
            _accumulate(sink, aid, full)
            _accumulate(sink, bid, -full)

        return bwd

    return _record_op(out, (a, b), make)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-6) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values; it is run once under a fresh tape for the analytic gradients and
    then twice per parameter element for the numeric ones. The error for one
    element is |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if step <= 0.0:
        raise ContractError(f"finite_diff_check needs step > 0, got {step}")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("finite_diff_check parameters must have requires_grad set")
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = gflat[i]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
