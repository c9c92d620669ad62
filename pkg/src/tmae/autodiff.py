"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is 0-d, 1-d, or 2-d, which is all a one-layer transformer
autoencoder needs. Operations executed inside a ``with Tape():`` block are
recorded; calling :func:`backward` replays the tape in reverse execution
order (a valid reverse topological order) and accumulates gradients into
the participating tensors. Outside a tape, operations are plain numpy
computations with no recording overhead.

Gradient semantics: intermediate tensors get a fresh gradient on every
backward pass; leaf tensors (in particular :class:`Parameter`) accumulate
across passes until reset, so repeated backward calls add up.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_STATE = threading.local()
_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finite-value checking of every operation output (slow)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Recorded operation graph of one forward pass (single-threaded)."""

    __slots__ = ("_nodes",)

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)


class Tensor:
    """Shape-tagged dense array of 64-bit floats."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Operator sugar; scalars are Python floats, everything else a Tensor.
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named leaf tensor whose gradient persists (zero-filled at rest)."""

    __slots__ = ("name",)

    def __init__(self, name: str, value) -> None:
        super().__init__(value)
        if not name:
            raise ValueError("parameter name must be non-empty")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _emit(data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in operation output")
    tape = _current_tape()
    if tape is not None:
        tape._nodes.append((out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on.

    Leaf gradients accumulate across calls; intermediates are reset each
    pass, so two backward calls double every leaf gradient exactly.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = set()
    for out, _ in tape._nodes:
        produced.add(id(out))
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")
    for out, _ in tape._nodes:
        out.grad = None
    loss.grad = np.ones(())
    for out, backward_fn in reversed(tape._nodes):
        if out.grad is not None:
            backward_fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-d row bias against a 2-d left operand."""
    if a.shape == b.shape:
        def bk(g):
            _accum(a, g)
            _accum(b, g)
        return _emit(a.data + b.data, bk)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bk(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
        return _emit(a.data + b.data, bk)
    raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bk(g):
            _accum(a, g)
            _accum(b, -g)
        return _emit(a.data - b.data, bk)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bk(g):
            _accum(a, g)
            _accum(b, -g.sum(axis=0))
        return _emit(a.data - b.data, bk)
    raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bk(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _emit(a.data * b.data, bk)


def neg(a: Tensor) -> Tensor:
    def bk(g):
        _accum(a, -g)

    return _emit(-a.data, bk)


def scale(a: Tensor, c) -> Tensor:
    c = float(c)

    def bk(g):
        _accum(a, g * c)

    return _emit(a.data * c, bk)


def add_scalar(a: Tensor, c) -> Tensor:
    c = float(c)

    def bk(g):
        _accum(a, g)

    return _emit(a.data + c, bk)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bk(g):
        _accum(a, g * mask)

    return _emit(np.where(mask, a.data, 0.0), bk)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bk(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _emit(x * cdf, bk)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # branch on sign to avoid overflow in exp
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bk(g):
        _accum(a, g * out * (1.0 - out))

    return _emit(out, bk)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), overflow-safe; derivative is the logistic sigmoid."""
    x = a.data

    def bk(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accum(a, g * s)

    return _emit(np.logaddexp(0.0, x), bk)


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    def bk(g):
        _accum(a, g * np.sign(a.data))

    return _emit(np.abs(a.data), bk)


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bk(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _emit(a.data @ b.data, bk)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")

    def bk(g):
        _accum(a, g.T)

    return _emit(a.data.T.copy(), bk)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bk(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accum(x, (g - dot) * out)

    return _emit(out, bk)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row (population variance), then apply gain and bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bk(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _emit(xhat * gain.data + bias.data, bk)


def max_pool_rows(x: Tensor) -> Tensor:
    """Column-wise maximum of a matrix; gradient routes to the first argmax row."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("empty pooling input" if x.ndim == 2 else
                         f"max_pool_rows needs a matrix, got shape {x.shape}")
    rows = np.argmax(x.data, axis=0)  # first occurrence on ties
    cols = np.arange(x.shape[1])

    def bk(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[rows, cols] += g

    return _emit(x.data[rows, cols].copy(), bk)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of a matrix."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"mean_rows needs a non-empty matrix, got shape {x.shape}")
    m = x.shape[0]

    def bk(g):
        _accum(x, np.broadcast_to(g / m, x.shape))

    return _emit(x.data.mean(axis=0), bk)


# ---------------------------------------------------------------------------
# structural ops


def _as_row(data: np.ndarray) -> np.ndarray:
    return data.reshape(1, -1) if data.ndim == 1 else data


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices/vectors along rows; 1-d inputs count as single rows."""
    if not parts:
        raise ShapeError("concat_rows needs at least one input")
    blocks = [_as_row(p.data) for p in parts]
    width = blocks[0].shape[1]
    if any(b.shape[1] != width for b in blocks):
        raise ShapeError(f"concat_rows width mismatch: {[p.shape for p in parts]}")
    spans = []
    offset = 0
    for p, b in zip(parts, blocks):
        spans.append((p, offset, offset + b.shape[0]))
        offset += b.shape[0]

    def bk(g):
        for p, lo, hi in spans:
            piece = g[lo:hi]
            _accum(p, piece[0] if p.ndim == 1 else piece)

    return _emit(np.concatenate(blocks, axis=0), bk)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one input")
    if any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols needs matrices, got {[p.shape for p in parts]}")
    height = parts[0].shape[0]
    if any(p.shape[0] != height for p in parts):
        raise ShapeError(f"concat_cols height mismatch: {[p.shape for p in parts]}")
    spans = []
    offset = 0
    for p in parts:
        spans.append((p, offset, offset + p.shape[1]))
        offset += p.shape[1]

    def bk(g):
        for p, lo, hi in spans:
            _accum(p, g[:, lo:hi])

    return _emit(np.concatenate([p.data for p in parts], axis=1), bk)


def concat_vecs(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.ndim != 1 for p in parts):
        raise ShapeError("concat_vecs needs 1-d inputs")
    spans = []
    offset = 0
    for p in parts:
        spans.append((p, offset, offset + p.shape[0]))
        offset += p.shape[0]

    def bk(g):
        for p, lo, hi in spans:
            _accum(p, g[lo:hi])

    return _emit(np.concatenate([p.data for p in parts]), bk)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {x.shape}")

    def bk(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    return _emit(x.data[start:stop].copy(), bk)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {x.shape}")

    def bk(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, start:stop] += g

    return _emit(x.data[:, start:stop].copy(), bk)


def take_row(x: Tensor, i: int) -> Tensor:
    """Row ``i`` of a matrix as a 1-d vector."""
    if x.ndim != 2 or not (0 <= i < x.shape[0]):
        raise ShapeError(f"take_row {i} invalid for shape {x.shape}")

    def bk(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[i] += g

    return _emit(x.data[i].copy(), bk)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a matrix by index; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a matrix and 1-d indices, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for {table.shape[0]} rows")

    def bk(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _emit(table.data[idx], bk)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape

    def bk(g):
        _accum(x, g.reshape(shape))

    return _emit(x.data.reshape(-1).copy(), bk)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bk(g):
        _accum(x, g * keep)

    return _emit(x.data * keep, bk)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    def bk(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _emit(np.sum(x.data), bk)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    if n == 0:
        raise ShapeError("mean_all of an empty tensor")

    def bk(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _emit(np.mean(x.data), bk)


def grad_check(forward: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``forward`` must be deterministic and rebuild the loss from the current
    parameter values on every call. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    with Tape() as tape:
        loss = forward()
    for p in params:
        p.zero_grad()
    backward(loss, tape)
    analytic = [np.array(p.grad, dtype=np.float64).reshape(-1) for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(forward().data)
            flat[i] = orig - eps
            lo = float(forward().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(an[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
