"""Dense 2-D float64 tensors with reverse-mode differentiation.

The engine is deliberately small: tensors are immutable matrices, every
differentiable operation appends one record to an explicit :class:`Tape`,
and :func:`backward` replays the records once in reverse. Gradients
accumulate additively when a node feeds several consumers. There is no
broadcasting beyond row-vector bias addition and no dtype other than
float64, which keeps the finite-difference checker meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DeterminismError, DataError, NumericError, ShapeError

Array = np.ndarray


def _as_matrix(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got array of ndim {arr.ndim}")
    return np.ascontiguousarray(arr)


def _require_finite(arr: Array, op: str) -> None:
    # Fast screen: the sum is non-finite whenever any entry is. A sum that
    # overflows on huge-but-finite entries would trip the screen, so the
    # precise elementwise check delivers the verdict.
    if not math.isfinite(float(arr.sum())) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """Immutable (rows x cols) float64 matrix, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        data = _as_matrix(values)
        _require_finite(data, "tensor construction")
        data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, data: Array, tape: "Tape | None", node: int | None) -> "Tensor":
        # Fast path for op results: `data` is a fresh, already-validated array.
        out = object.__new__(cls)
        data.flags.writeable = False
        out.data = data
        out.tape = tape
        out.node = node
        return out

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 tensor, got {self.rows}x{self.cols}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor({self.rows}x{self.cols}{tag})"


@dataclass
class Record:
    """One tape entry: operation kind, input node ids (None = untracked
    constant), output node id, and values saved for the backward rule."""

    op: str
    inputs: tuple[int | None, ...]
    out: int
    saved: tuple


class Tape:
    """Ordered operation log for one forward pass.

    Records are appended in execution order, so every record's inputs
    precede it; the backward pass walks the list once in reverse.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.num_nodes = 0
        self.parameters: list[int] = []
        self._shapes: dict[int, tuple[int, int]] = {}

    def _new_node(self, shape: tuple[int, int]) -> int:
        node = self.num_nodes
        self.num_nodes += 1
        self._shapes[node] = shape
        return node

    def parameter(self, values) -> Tensor:
        """Register a trainable leaf. Untouched parameters still receive a
        (zero) entry in the gradient table."""
        t = Tensor(values)
        t.tape = self
        t.node = self._new_node(t.data.shape)
        self.parameters.append(t.node)
        return t

    def watch(self, t: Tensor) -> Tensor:
        """Like :meth:`parameter` but for an existing (already validated)
        tensor; shares its storage instead of re-checking it."""
        out = Tensor._wrap(t.data, self, self._new_node(t.data.shape))
        self.parameters.append(out.node)
        return out


def _result(tape: Tape | None, op: str, inputs: tuple[int | None, ...],
            data: Array, saved: tuple) -> Tensor:
    _require_finite(data, op)
    if tape is None:
        return Tensor._wrap(data, None, None)
    node = tape._new_node(data.shape)
    tape.records.append(Record(op, inputs, node, saved))
    return Tensor._wrap(data, tape, node)


def _common_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ShapeError("operands belong to different tapes")
            tape = t.tape
    return tape


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    out = a.data @ b.data
    return _result(_common_tape(a, b), "matmul", (a.node, b.node), out,
                   (a.data, b.data))


def transpose(a: Tensor) -> Tensor:
    return _result(a.tape, "transpose", (a.node,), np.ascontiguousarray(a.data.T), ())


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a 1 x n row vector broadcast over a's rows."""
    if a.data.shape == b.data.shape:
        broadcast = False
    elif b.rows == 1 and b.cols == a.cols:
        broadcast = True
    else:
        raise ShapeError(f"add shape mismatch: {a.rows}x{a.cols} + {b.rows}x{b.cols}")
    out = a.data + b.data
    return _result(_common_tape(a, b), "add", (a.node, b.node), out, (broadcast,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.rows}x{a.cols} * {b.rows}x{b.cols}")
    out = a.data * b.data
    return _result(_common_tape(a, b), "mul", (a.node, b.node), out, (a.data, b.data))


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift, elementwise with python scalars."""
    out = a.data * scale + shift
    return _result(a.tape, "affine", (a.node,), out, (scale,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _result(a.tape, "relu", (a.node,), out, (a.data,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"cannot reshape {a.rows}x{a.cols} to {rows}x{cols}")
    out = a.data.reshape(rows, cols).copy()
    return _result(a.tape, "reshape", (a.node,), out, (a.data.shape,))


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: N x d -> 1 x d."""
    if a.rows < 1:
        raise ShapeError("mean_rows requires at least one row")
    out = a.data.mean(axis=0, keepdims=True)
    return _result(a.tape, "mean_rows", (a.node,), out, (a.rows,))


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.data.sum()]])
    return _result(a.tape, "sum_all", (a.node,), out, (a.data.shape,))


def row_softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; each row sums to 1."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return _result(a.tape, "row_softmax", (a.node,), out, (out,))


def row_log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    return _result(a.tape, "row_log_softmax", (a.node,), out, (np.exp(out),))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a 1 x C logit row, stable log-sum-exp."""
    if logits.rows != 1:
        raise ShapeError(f"cross_entropy expects a 1xC logit row, got {logits.rows}x{logits.cols}")
    if not 0 <= label < logits.cols:
        raise DataError(f"label {label} out of range for {logits.cols} classes")
    x = logits.data[0]
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = np.array([[lse - x[label]]])
    p = np.exp(x - lse)
    return _result(logits.tape, "cross_entropy", (logits.node,), out, (p, label))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _bw_matmul(rec: Record, g: Array, out: list):
    a, b = rec.saved
    if rec.inputs[0] is not None:
        out.append((rec.inputs[0], g @ b.T))
    if rec.inputs[1] is not None:
        out.append((rec.inputs[1], a.T @ g))


def _bw_transpose(rec: Record, g: Array, out: list):
    out.append((rec.inputs[0], np.ascontiguousarray(g.T)))


def _bw_add(rec: Record, g: Array, out: list):
    (broadcast,) = rec.saved
    if rec.inputs[0] is not None:
        out.append((rec.inputs[0], g.copy()))
    if rec.inputs[1] is not None:
        out.append((rec.inputs[1], g.sum(axis=0, keepdims=True) if broadcast else g.copy()))


def _bw_mul(rec: Record, g: Array, out: list):
    a, b = rec.saved
    if rec.inputs[0] is not None:
        out.append((rec.inputs[0], g * b))
    if rec.inputs[1] is not None:
        out.append((rec.inputs[1], g * a))


def _bw_affine(rec: Record, g: Array, out: list):
    (scale,) = rec.saved
    out.append((rec.inputs[0], g * scale))


def _bw_relu(rec: Record, g: Array, out: list):
    (x,) = rec.saved
    out.append((rec.inputs[0], g * (x > 0.0)))


def _bw_reshape(rec: Record, g: Array, out: list):
    (shape,) = rec.saved
    out.append((rec.inputs[0], g.reshape(shape).copy()))


def _bw_mean_rows(rec: Record, g: Array, out: list):
    (n,) = rec.saved
    out.append((rec.inputs[0], np.repeat(g / n, n, axis=0)))


def _bw_sum_all(rec: Record, g: Array, out: list):
    (shape,) = rec.saved
    out.append((rec.inputs[0], np.full(shape, g[0, 0])))


def _bw_row_softmax(rec: Record, g: Array, out: list):
    (y,) = rec.saved
    out.append((rec.inputs[0], y * (g - (g * y).sum(axis=1, keepdims=True))))


def _bw_row_log_softmax(rec: Record, g: Array, out: list):
    (softmax,) = rec.saved
    out.append((rec.inputs[0], g - softmax * g.sum(axis=1, keepdims=True)))


def _bw_cross_entropy(rec: Record, g: Array, out: list):
    p, label = rec.saved
    grad = p.copy()
    grad[label] -= 1.0
    out.append((rec.inputs[0], g[0, 0] * grad.reshape(1, -1)))


_BACKWARD: dict[str, Callable[[Record, Array, list], None]] = {
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "add": _bw_add,
    "mul": _bw_mul,
    "affine": _bw_affine,
    "relu": _bw_relu,
    "reshape": _bw_reshape,
    "mean_rows": _bw_mean_rows,
    "sum_all": _bw_sum_all,
    "row_softmax": _bw_row_softmax,
    "row_log_softmax": _bw_row_log_softmax,
    "cross_entropy": _bw_cross_entropy,
}


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse-accumulate gradients of a scalar loss over the tape.

    Returns a table mapping node id to gradient tensor. Every registered
    parameter gets an entry; parameters the loss never touched get zeros.
    """
    if loss.tape is not tape or loss.node is None:
        raise ShapeError("loss tensor is not tracked on this tape")
    if loss.data.shape != (1, 1):
        raise ShapeError(f"loss must be a 1x1 scalar, got {loss.rows}x{loss.cols}")

    grads: list[Array | None] = [None] * tape.num_nodes
    grads[loss.node] = np.ones((1, 1))
    contributions: list = []
    for rec in reversed(tape.records):
        g = grads[rec.out]
        if g is None:
            continue
        contributions.clear()
        _BACKWARD[rec.op](rec, g, contributions)
        for node, delta in contributions:
            if grads[node] is None:
                grads[node] = delta
            else:
                grads[node] = grads[node] + delta

    table: dict[int, Tensor] = {}
    for node, g in enumerate(grads):
        if g is not None:
            table[node] = Tensor._wrap(np.ascontiguousarray(g), None, None)
    for node in tape.parameters:
        if node not in table:
            table[node] = Tensor._wrap(np.zeros(tape._shapes[node]), None, None)
    return table


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def gradcheck(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
              eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes a list of tensors and returns a 1x1 loss; it must be
    deterministic and must build its result from the operations in this
    module so the tape can track it. Returns the maximum over all
    coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise DataError(f"eps must be positive, got {eps}")

    arrays = [np.array(p.data) for p in params]

    def evaluate(values: list[Array]) -> float:
        out = f([Tensor(v) for v in values])
        return out.item()

    if evaluate(arrays) != evaluate(arrays):
        raise DeterminismError("function returned different values for identical inputs")

    tape = Tape()
    tracked = [tape.parameter(a) for a in arrays]
    loss = f(tracked)
    table = backward(tape, loss)
    analytic = [table[t.node].data for t in tracked]

    def perturbed(i: int, idx, value: float) -> list[Array]:
        out = list(arrays)
        changed = arrays[i].copy()
        changed[idx] = value
        out[i] = changed
        return out

    worst = 0.0
    for i, base in enumerate(arrays):
        for idx in np.ndindex(base.shape):
            hi = evaluate(perturbed(i, idx, base[idx] + eps))
            lo = evaluate(perturbed(i, idx, base[idx] - eps))
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[i][idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD or Adam state; moment buffers are allocated on first use."""

    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)
    _scratch: list[Array] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer kind '{self.kind}'")
        if self.learning_rate < 0:
            raise DataError(f"learning rate must be non-negative, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: Sequence[Tensor],
                   grads: Sequence[Tensor]) -> list[Tensor]:
    """One update; returns new parameter tensors (inputs are immutable)."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.data.shape != g.data.shape:
            raise ShapeError(
                f"param {i} is {p.rows}x{p.cols} but grad is {g.rows}x{g.cols}")

    state.step += 1
    lr = state.learning_rate
    updated: list[Tensor] = []
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            new = p.data - lr * g.data
            _require_finite(new, "optimizer_step")
            updated.append(Tensor._wrap(new, None, None))
        return updated

    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        state._scratch = [np.empty_like(p.data) for p in params]
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.data.shape:
            raise ShapeError(f"moment {i} shape {state.m[i].shape} does not match param")
        m = state.m[i]
        v = state.v[i]
        work = state._scratch[i]
        m *= state.beta1
        np.multiply(g.data, 1.0 - state.beta1, out=work)
        m += work
        v *= state.beta2
        np.multiply(g.data, g.data, out=work)
        work *= 1.0 - state.beta2
        v += work
        np.divide(v, c2, out=work)
        np.sqrt(work, out=work)
        work += state.epsilon
        np.divide(m, work, out=work)
        work *= lr / c1
        new = p.data - work
        _require_finite(new, "optimizer_step")
        updated.append(Tensor._wrap(new, None, None))
    return updated


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> Array:
    """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))
