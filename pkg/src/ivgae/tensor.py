"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one input requires a gradient.  ``backward(root)`` walks the
tape in reverse creation order (which is a valid topological order) and
accumulates gradients into leaf tensors.

Elementwise broadcasting is deliberately narrow: operands must have equal
shapes, or one of them must be a scalar.  Row-vector bias addition and
symmetric adjacency normalisation are exposed as dedicated ops instead.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import (
    ConfigError,
    ContractError,
    DeterminismError,
    DimensionError,
    DomainError,
    EmptyAggregationError,
)

logger = logging.getLogger(__name__)

_EXP_LIMIT = 709.0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather_rows(self, idx)


@dataclass
class Node:
    out: Tensor
    op: str
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def dump(self) -> str:
        """Text listing of the tape: node id, op kind, input ids and shapes."""
        ids = {id(n.out): k for k, n in enumerate(self.nodes)}
        lines = []
        for k, node in enumerate(self.nodes):
            ins = ",".join(
                f"{ids.get(id(p), 'leaf')}{list(p.shape)}" for p in node.parents
            )
            lines.append(f"{k}\t{node.op}\t{ins}\t-> {list(node.out.shape)}")
        return "\n".join(lines)


class _State:
    tape = Tape()
    enabled = True


def active_tape() -> Tape:
    return _State.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _State.enabled
    _State.enabled = False
    try:
        yield
    finally:
        _State.enabled = prev


@contextlib.contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Run a block against its own tape, restoring the previous one afterwards."""
    prev = _State.tape
    _State.tape = Tape()
    try:
        yield _State.tape
    finally:
        _State.tape = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _State.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _State.tape.record(Node(out, op, parents, backward))
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, "mul", (a, b), backward)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(t.data * c, "scale", (t,), lambda g: (g * c,))


def relu(t: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    out = np.maximum(t.data, 0.0)
    return _make(out, "relu", (t,), lambda g: (g * (out > 0),))


def sigmoid(t: Tensor) -> Tensor:
    s = expit(t.data)
    return _make(s, "sigmoid", (t,), lambda g: (g * s * (1.0 - s),))


def exp(t: Tensor) -> Tensor:
    if np.any(t.data > _EXP_LIMIT):
        raise DomainError(f"exp overflow: max input {t.data.max():.4g} > {_EXP_LIMIT}")
    e = np.exp(t.data)
    return _make(e, "exp", (t,), lambda g: (g * e,))


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise DomainError(f"log of non-positive value (min {t.data.min():.4g})")
    x = t.data
    return _make(np.log(x), "log", (t,), lambda g: (g / x,))


def log_sigmoid(t: Tensor) -> Tensor:
    """log(sigmoid(x)) in the overflow-free form -(max(-x,0) + log1p(exp(-|x|)))."""
    x = t.data
    out = -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    return _make(out, "log_sigmoid", (t,), lambda g: (g * expit(-x),))


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    inside = (t.data >= lo) & (t.data <= hi)
    return _make(np.clip(t.data, lo, hi), "clamp", (t,), lambda g: (g * inside,))


def bce_with_logits(logits: Tensor, target, pos_weight: float = 1.0) -> Tensor:
    """Elementwise weighted binary cross-entropy, ``target`` held constant.

    loss = -[w * t * log sigmoid(x) + (1 - t) * log sigmoid(-x)]
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs target {t.shape}")
    x = logits.data
    sp_neg = np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x)))  # -log sigmoid(x)
    sp_pos = sp_neg + x  # -log sigmoid(-x)
    out = pos_weight * t * sp_neg + (1.0 - t) * sp_pos

    def backward(g):
        s = expit(x)
        return (g * ((1.0 - t) * s - pos_weight * t * (1.0 - s)),)

    return _make(out, "bce_with_logits", (logits,), backward)


# ---------------------------------------------------------------- reductions


def _axis_count(shape, axis) -> int:
    return int(np.prod(shape)) if axis is None else shape[axis]


def _check_axis(t: Tensor, axis) -> None:
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


def sum(t: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    _check_axis(t, axis)
    shape = t.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(t.data.sum(axis=axis)), "sum", (t,), backward)


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(t, axis)
    count = _axis_count(t.shape, axis)
    if count == 0:
        raise EmptyAggregationError(f"mean over empty set (shape {t.shape}, axis {axis})")
    return scale(sum(t, axis), 1.0 / count)


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), backward)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {t.shape}")
    return _make(
        np.swapaxes(t.data, -1, -2).copy(), "transpose", (t,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _make(out, "reshape", (t,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero parts")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(p.shape, ref)) if k != ax
        ):
            raise DimensionError(f"concat: off-axis mismatch {ref} vs {p.shape} (axis {axis})")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), "concat", tuple(parts), backward)


class IndexPlan:
    """An integer index array plus a lazily built sparse scatter matrix.

    Reusing one plan for every gather over the same index (the edge
    endpoints of a graph, say) makes the backward scatters cheap.
    ``tiebreak`` fixes the summation order inside each bucket (for instance
    the other endpoint of each edge), so sums do not depend on the order in
    which entries arrive.
    """

    __slots__ = ("idx", "num", "tiebreak", "_csr", "_counts")

    def __init__(self, idx, num: int, tiebreak=None):
        self.idx = np.asarray(idx, dtype=np.int64) % max(num, 1)
        self.num = num
        self.tiebreak = None if tiebreak is None else np.asarray(tiebreak).ravel()
        self._csr = None
        self._counts = None

    @property
    def counts(self) -> np.ndarray:
        if self._counts is None:
            self._counts = np.bincount(self.idx.ravel(), minlength=self.num)
        return self._counts

    def scatter(self, g: np.ndarray) -> np.ndarray:
        """Sum the trailing blocks of ``g`` (shape idx.shape + row shape) into their rows."""
        k = self.idx.size
        row_shape = g.shape[self.idx.ndim:]
        if k == 0:
            return np.zeros((self.num,) + row_shape)
        if self._csr is None:
            flat = self.idx.ravel()
            if self.tiebreak is None:
                order = np.argsort(flat, kind="stable")
            else:
                order = np.lexsort((self.tiebreak, flat))
            ptr = np.concatenate([[0], np.cumsum(self.counts)])
            self._csr = sparse.csr_matrix((np.ones(k), order, ptr), shape=(self.num, k))
        return np.asarray(self._csr @ g.reshape(k, -1)).reshape((self.num,) + row_shape)


def scatter_rows(idx: np.ndarray, g: np.ndarray, num: int) -> np.ndarray:
    """Sum the rows of ``g`` into ``num`` buckets given by ``idx``."""
    return IndexPlan(idx, num).scatter(g)


def gather_rows(t: Tensor, idx) -> Tensor:
    """``t[idx]`` along the first axis; idx is an integer array or an :class:`IndexPlan`."""
    if isinstance(idx, IndexPlan):
        if idx.num != t.shape[0]:
            raise DimensionError(f"index plan over {idx.num} rows used on first axis {t.shape[0]}")
        plan = idx
    else:
        raw = np.asarray(idx, dtype=np.int64)
        if raw.size and (raw.min() < -t.shape[0] or raw.max() >= t.shape[0]):
            raise DimensionError(f"gather index out of range for first axis of size {t.shape[0]}")
        plan = IndexPlan(raw, t.shape[0])
    shape = t.shape

    def backward(g):
        return (plan.scatter(g).reshape(shape),)

    return _make(t.data[plan.idx], "gather", (t,), backward)


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous block ``t[start:stop]`` of the first axis."""
    if not 0 <= start <= stop <= t.shape[0]:
        raise DimensionError(f"row slice {start}:{stop} out of range for {t.shape}")
    shape = t.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(t.data[start:stop], "slice_rows", (t,), backward)


def segment_mean(t: Tensor, segments, num_segments: int) -> tuple[Tensor, int]:
    """Mean of the rows of ``t`` grouped by ``segments`` (an array or :class:`IndexPlan`).

    Segments without members produce a zero row instead of raising; the
    number of such empty segments is returned alongside the result.
    """
    plan = segments if isinstance(segments, IndexPlan) else IndexPlan(segments, num_segments)
    if plan.num != num_segments:
        raise DimensionError(f"index plan has {plan.num} segments, expected {num_segments}")
    seg = plan.idx
    if seg.shape[0] != t.shape[0]:
        raise DimensionError(f"segment ids {seg.shape} do not match rows {t.shape}")
    counts = plan.counts.astype(np.float64)
    empty = int(np.count_nonzero(counts == 0))
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = plan.scatter(t.data)
    out *= inv.reshape((-1,) + (1,) * (t.ndim - 1))
    row_w = inv[seg].reshape((-1,) + (1,) * (t.ndim - 1))

    def backward(g):
        return (g[seg] * row_w,)

    return _make(out, "segment_mean", (t,), backward), empty


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b has shape (x.shape[-1],) and is broadcast over leading axes."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        return g, g.sum(axis=lead)

    return _make(x.data + b.data, "add_bias", (x, b), backward)


def softmax_rows(t: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax_rows", (t,), backward)


def log_softmax_rows(t: Tensor) -> Tensor:
    z = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax_rows", (t,), backward)


def sym_normalize(adj: Tensor) -> Tensor:
    """D^{-1/2} (A + I) D^{-1/2} with D the row-degree matrix of A + I."""
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DimensionError(f"sym_normalize needs a square matrix, got {adj.shape}")
    b = adj.data + np.eye(adj.shape[0])
    deg = b.sum(axis=1)
    if np.any(deg <= 0):
        raise DomainError("sym_normalize: non-positive degree")
    s = deg ** -0.5
    out = s[:, None] * b * s[None, :]

    def backward(g):
        ds = -0.5 * deg ** -1.5
        row = (g * b * s[None, :]).sum(axis=1)
        col = (g * b * s[:, None]).sum(axis=0)
        gd = ds * (row + col)
        return (g * s[:, None] * s[None, :] + gd[:, None],)

    return _make(out, "sym_normalize", (adj,), backward)


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``root``; returns {leaf tensor: gradient}.

    Leaf gradients are also accumulated into ``leaf.grad``.  The active tape
    is reset afterwards.
    """
    if root.data.size != 1 or root.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = _State.tape
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        tape.reset()
        return leaves
    if root._backward is None:
        leaves[root] = grads[id(root)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                leaves[parent] = leaves[parent] + pg if parent in leaves else pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    tape.reset()
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    results: list[GradCheckResult]
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
    max_elems: int | None = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    At most ``max_elems`` coordinates per parameter are probed (a seeded
    random subset); ``None`` checks every coordinate.
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    with no_grad():
        base = f().data.copy()
        again = f().data.copy()
    if not np.array_equal(base, again):
        raise DeterminismError("f is not deterministic under fixed parameters")

    for p in params:
        p.zero_grad()
    _State.tape.reset()
    backward(f())
    picker = np.random.default_rng(seed)
    results = []
    for k, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(picker.choice(flat.size, max_elems, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for m, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                hi = f().data.item()
                flat[i] = orig - step
                lo = f().data.item()
                flat[i] = orig
                numeric[m] = (hi - lo) / (2 * step)
        err = relative_error(analytic.reshape(-1)[idx], numeric)
        worst = float(err.max()) if err.size else 0.0
        results.append(GradCheckResult(p.name or f"param{k}", worst, idx.size, worst <= tol))
        p.zero_grad()
    return GradCheckReport(results, tol)


# ---------------------------------------------------------------- optimiser


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    m: Sequence[np.ndarray],
    v: Sequence[np.ndarray],
    lr: float,
    betas: tuple[float, float],
    eps: float,
    t: int,
) -> None:
    """In-place Adam update with bias correction; ``t`` is 1-based."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m_, v_ in zip(params, grads, m, v):
        m_ *= b1
        m_ += (1.0 - b1) * g
        v_ *= b2
        v_ += (1.0 - b2) * g * g
        p -= lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        seen = set()
        for p in params:
            if id(p) in seen:
                raise ConfigError(f"parameter {p.name!r} registered twice")
            seen.add(id(p))
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        adam_step(
            [p.data for p in self.params], grads, self.m, self.v, self.lr, self.betas, self.eps, self.t
        )
