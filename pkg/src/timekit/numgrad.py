"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trained model in the package (BPR-MF, the linear-propagation GCN, the
GRU and NCDE forecasters) is built from the ops in this module.  Operations
are recorded on a thread-local tape while gradient tracking is enabled;
:func:`backward` replays the tape in reverse and then clears it.

No broadcasting: shapes must conform exactly, except for the explicit
row-broadcast in :func:`add_row` and scalar scaling.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_consumed", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    # operator sugar so integrators can be written once for arrays and tensors
    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, float(other))
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -float(other))
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return add(scale(self, -1.0), as_tensor(other)) if not np.isscalar(other) else shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


@contextmanager
def fresh_tape():
    """Run a block on an empty tape, restoring the caller's tape afterwards."""
    prev = getattr(_local, "tape", None)
    _local.tape = Tape()
    try:
        yield _local.tape
    finally:
        _local.tape = prev


def _check_finite(value: np.ndarray, op: str) -> None:
    if value.size > 4096:
        # a finite sum implies finite entries; only an overflowing sum needs the full scan
        with np.errstate(over="ignore", invalid="ignore"):
            if np.isfinite(value.sum()):
                return
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(value, op)
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        tape.record(Node(out, inputs, backward_fn, op))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.value + c, (a,), lambda g: (g,), "shift")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def bmv(a: Tensor, x: Tensor) -> Tensor:
    """Batched matrix-vector product: (B, m, n) x (B, n) -> (B, m)."""
    if a.value.ndim != 3 or x.value.ndim != 2 or a.shape[0] != x.shape[0] or a.shape[2] != x.shape[1]:
        raise ShapeError(f"bmv: shape mismatch {a.shape} vs {x.shape}")
    av, xv = a.value, x.value
    out = np.einsum("bmn,bn->bm", av, xv)

    def back(g):
        return g[:, :, None] * xv[:, None, :], np.einsum("bmn,bm->bn", av, g)

    return _make(out, (a, x), back, "bmv")


def spmm(adj, x: Tensor) -> Tensor:
    """Product of a constant (possibly scipy-sparse) matrix with a tensor."""
    if adj.shape[1] != x.shape[0] or x.value.ndim != 2:
        raise ShapeError(f"spmm: shape mismatch {adj.shape} vs {x.shape}")
    adj_t = adj.T.tocsr() if sp.issparse(adj) else adj.T
    return _make(np.asarray(adj @ x.value), (x,), lambda g: (np.asarray(adj_t @ g),), "spmm")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector to every row of a matrix."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row: shape mismatch {x.shape} vs {b.shape}")
    return _make(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), "add_row")


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    v = x.value
    y = -np.logaddexp(0.0, -v)
    s = _stable_sigmoid(-v)
    return _make(y, (x,), lambda g: (g * s,), "log_sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)

    def back(g):
        d = y * y
        np.subtract(1.0, d, out=d)
        d *= g
        return (d,)

    return _make(y, (x,), back, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _make(y, (x,), lambda g: (g.reshape(old),), "reshape")


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; use :func:`gather` for integer arrays."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(np.array(x.value[index]), (x,), back, "slice")


def gather(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a matrix by integer index (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        full = np.zeros((n,) + g.shape[1:])
        np.add.at(full, rows, g)
        return (full,)

    return _make(x.value[rows], (x,), back, "gather")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(
        np.concatenate([t.value for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _make(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")
    ax = axis % len(shape)
    return _make(x.value.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make(np.array(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot products of two equally shaped matrices."""
    _same_shape(a, b, "rowdot")
    av, bv = a.value, b.value
    return _make(np.einsum("ij,ij->i", av, bv), (a, b), lambda g: (g[:, None] * bv, g[:, None] * av), "rowdot")


def mean_squared_error(prediction: Tensor, target) -> Tensor:
    target = as_tensor(target)
    _same_shape(prediction, target, "mean_squared_error")
    diff = prediction.value - target.value
    n = diff.size

    def back(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return _make(np.array(np.mean(diff * diff)), (prediction, target), back, "mean_squared_error")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_row(matmul(x, w), b)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on every parameter reachable through the tape.

    Parameters listed in ``params`` but not reached get a zero gradient.  The
    tape is cleared afterwards, so a second call without a new forward pass
    raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward called twice on the same loss without a new forward pass")
    tape = get_tape()
    if not tape.nodes:
        raise TapeError("backward: tape is empty (no recorded forward pass)")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not depend on any tracked parameter")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.out) for n in tape.nodes}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)

    for p in params:
        leaves.setdefault(id(p), p)
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.value) if g is None else g.reshape(t.shape)
    loss._consumed = True
    tape.clear()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, weight_decay: float = 0.0) -> AdamState:
    """One Adam update in place, with decoupled weight decay applied first.

    A parameter whose ``grad`` is None is treated as having zero gradient.
    """
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    if len(state.m) != len(params):
        raise ShapeError(f"adam_step: state holds {len(state.m)} slots for {len(params)} params")
    for p, m in zip(params, state.m):
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: state shape {m.shape} vs param shape {p.shape}")
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {p.name or 'parameter'}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else 0.0
        if weight_decay:
            p.value -= lr * weight_decay * p.value
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def make_rng(seed) -> np.random.Generator:
    """Seeded stream on the Philox-4x64 counter-based generator."""
    return np.random.Generator(np.random.Philox(seed))
