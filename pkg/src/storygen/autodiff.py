"""Dense tensors with reverse-mode automatic differentiation.

Float32 throughout (float64 allowed for verification harnesses). Operations
record onto a per-thread tape in execution order; ``backward`` replays the
tape in reverse, which is a valid reverse-topological order because every
operation is appended after the operations that produced its inputs. The
tape is rebuilt on every forward pass (define-by-run) and cleared by
``backward``.

Gradients only accumulate into tensors whose ``requires_grad`` flag is set;
frozen tensors stay gradient-free even when gradients flow *through* the
operations they participate in.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class Tensor:
    """A dense array plus gradient bookkeeping.

    ``requires_grad`` marks either a trainable leaf or an intermediate value
    on a differentiable path. ``grad`` is lazily allocated by ``backward``
    and always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Accumulators are float64 regardless of data dtype: backward-pass
        # reductions cancel heavily and float32 accumulation costs ~3 digits.
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


@dataclass
class _Record:
    out: Tensor
    backward_fn: Callable[[np.ndarray], None]


@dataclass
class Tape:
    """Ordered record of executed differentiable operations."""

    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "tape"):
        _STATE.tape = Tape()
        _STATE.recording = True
    return _STATE


def active_tape() -> Tape:
    return _state().tape


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        st = _state()
        self._prev = st.recording
        st.recording = False
        return self

    def __exit__(self, *exc):
        _state().recording = self._prev
        return False


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    st = _state()
    if st.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        st.tape.records.append(_Record(out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The tape is consumed and cleared, whether or not it contained the loss.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if not tape.records:
        raise RuntimeError("backward called with an empty tape")
    try:
        loss.grad = np.ones(loss.data.shape, dtype=np.float64)
        for rec in reversed(tape.records):
            g = rec.out.grad
            if g is None:
                continue
            rec.backward_fn(g)
    finally:
        # Op outputs are intermediates by construction; their grads are
        # scratch space for the traversal, not results.
        for rec in tape.records:
            rec.out.grad = None
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D pairs or identically stacked 3-D pairs."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(np.matmul(a.data, b.data), dtype=np.result_type(a.dtype, b.dtype))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b.accumulate_grad(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(data, dtype=data.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(data, dtype=data.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out = Tensor(a.data * a.dtype.type(s), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * a.dtype.type(s))

    return _record(out, (a,), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def gelu(a: Tensor) -> Tensor:
    """GELU activation, tanh approximation (the GPT-2 variant)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _record(out, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with per-row max subtraction."""
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            a.accumulate_grad(p * (g - dot))

    return _record(out, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis (stable via max subtraction)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse, dtype=a.dtype)
    p = np.exp(out.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g - p * g.sum(axis=-1, keepdims=True))

    return _record(out, (a,), bw)


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part).

    A constant row maps to zeros: the epsilon keeps the zero-variance case
    finite.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, dtype=a.dtype)
    n = x.shape[-1]

    def bw(g):
        if a.requires_grad:
            gy = g
            gsum = gy.sum(axis=-1, keepdims=True)
            gysum = (gy * y).sum(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gy - gsum / n - y * gysum / n))

    return _record(out, (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids index the first axis of ``table``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.shape[0]}): "
            f"{int(ids.min())}..{int(ids.max())}"
        )
    out = Tensor(table.data[ids], dtype=table.dtype)

    def bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            table.accumulate_grad(acc)

    return _record(out, (table,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the sequence axis (axis 0)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: empty input list")
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) != 1:
        raise ShapeError(f"concat_rows: trailing dims differ: {sorted(trailing)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0),
                 dtype=np.result_type(*(p.dtype for p in parts)))
    sizes = [p.shape[0] for p in parts]

    def bw(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate_grad(g[offset:offset + n])
            offset += n

    return _record(out, parts, bw)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.data.mean(axis=axis), dtype=a.dtype)
    n = a.shape[axis]

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _record(out, (a,), bw)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), dtype=a.dtype)
    n = a.shape[axis]

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.repeat(np.expand_dims(g, axis), n, axis=axis))

    return _record(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g))

    return _record(out, (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.data[start:stop].copy(), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[start:stop] = g
            a.accumulate_grad(acc)

    return _record(out, (a,), bw)


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: row index out of range for {a.shape}")
    out = Tensor(a.data[rows], dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, rows, g)
            a.accumulate_grad(acc)

    return _record(out, (a,), bw)


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = a[i, cols[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"take_per_row expects 2-D input, got {a.shape}")
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: need {a.shape[0]} column indices, got {cols.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, cols], dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[rows, cols] = g
            a.accumulate_grad(acc)

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = Tensor(a.data.transpose(axes), dtype=a.dtype)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _record(out, (a,), bw)


def transpose_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if -1 in shape:
        known = -int(np.prod(shape))  # product of the fixed dims
        if known <= 0 or a.size % known:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        shape = tuple(a.size // known if n == -1 else n for n in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = Tensor(np.log(a.data), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _record(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * e)

    return _record(out, (a,), bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit L2 norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    y = a.data / norm
    out = Tensor(y, dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - y * dot) / norm)

    return _record(out, (a,), bw)


def split_heads(a: Tensor, n_heads: int) -> Tensor:
    """(seq, dim) -> (heads, seq, dim/heads)."""
    seq, dim = a.shape
    if dim % n_heads:
        raise ShapeError(f"split_heads: dim {dim} not divisible by {n_heads} heads")
    return transpose(reshape(a, (seq, n_heads, dim // n_heads)), (1, 0, 2))


def merge_heads(a: Tensor) -> Tensor:
    """(heads, seq, head_dim) -> (seq, heads*head_dim)."""
    h, seq, hd = a.shape
    return reshape(transpose(a, (1, 0, 2)), (seq, h * hd))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_coord: tuple
    n_coords: int
    non_finite: list = field(default_factory=list)

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"worst={self.worst_param}{self.worst_coord}, coords={self.n_coords})")


def grad_check(f, params: dict, step: float = 1e-3, rng=None,
               max_coords_per_param: int = 8) -> GradCheckResult:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor computed from the live ``params`` values. The numeric side is the
    fourth-order central stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) /
    12h, evaluated with the perturbed parameter upcast to float64: the
    shared float32 subcomputations then cancel between the stencil points
    and neither rounding nor O(h^2) truncation pollutes the reference at
    the default step.

    Returns the max over sampled coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    rng = rng or np.random.default_rng(0)

    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()
        p.zero_grad()

    worst = 0.0
    worst_param, worst_coord = "", ()
    non_finite = []
    n_checked = 0
    for name, p in params.items():
        flat_n = p.data.size
        if flat_n <= max_coords_per_param:
            coords = np.arange(flat_n)
        else:
            coords = rng.choice(flat_n, size=max_coords_per_param, replace=False)
        original = p.data
        p.data = original.astype(np.float64)
        try:
            for c in coords:
                idx = np.unravel_index(int(c), p.shape)
                saved = p.data[idx]
                evals = []
                with no_grad():
                    for offset in (-2.0, -1.0, 1.0, 2.0):
                        p.data[idx] = saved + offset * step
                        evals.append(f().item())
                p.data[idx] = saved
                n_checked += 1
                if not all(np.isfinite(e) for e in evals):
                    non_finite.append((name, idx, tuple(evals)))
                    continue
                fm2, fm1, fp1, fp2 = evals
                numeric = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * step)
                a = float(analytic[name][idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst:
                    worst, worst_param, worst_coord = rel, name, idx
        finally:
            p.data = original
    return GradCheckResult(worst, worst_param, worst_coord, n_checked, non_finite)
