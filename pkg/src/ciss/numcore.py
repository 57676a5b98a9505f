"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: forward values are plain numpy arrays, and
every differentiable primitive pushes a closure onto the active ``Tape``.
Calling :func:`backward` on a scalar result replays the closures in reverse
execution order, accumulating gradients additively across fan-out.

Determinism notes, relied on by the rest of the package:

* all values are float64 and every reduction uses a fixed order for a given
  input shape, so identical inputs give bitwise-identical outputs;
* :func:`linear` computes each output column as an independent matrix-vector
  product, so adding columns to a weight matrix never perturbs the existing
  ones (growing a classifier bank must not change old logits);
* ``relu``, ``select_positive`` and ``select_negative`` use subgradient 0
  exactly at their boundary.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(
            f"{op}: operand shapes {self.shape_a} and {self.shape_b} do not conform"
        )


class TapeError(RuntimeError):
    """Tape misuse: backward on a non-recorded value, or backward twice."""


class DomainError(ValueError):
    """An input left the domain of an operation (e.g. log of x <= 0)."""


class Tensor:
    """A dense float64 array that can participate in gradient recording.

    ``data`` is a float64 ndarray; ``grad`` is lazily allocated with the same
    shape the first time a gradient is accumulated. Operations never mutate
    their inputs' ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """The same values with no gradient participation."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalar operands use the scalar rules
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; primitives executed inside the ``with`` block
    record their backward closures here whenever an input requires a
    gradient. A tape supports exactly one backward traversal.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TapeError("tape context exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._records)


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tape_stack", None)
    if stack is None:
        stack = []
        _STATE.tape_stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def _record(out: Tensor, inputs: tuple, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every recorded tensor reachable from ``loss``.

    Accumulation is additive: leaves keep whatever was already in ``grad``
    (zero it between optimization steps). One traversal per tape.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError(
            "loss was not recorded on a tape; run the forward pass inside `with Tape():`"
        )
    if tape._consumed:
        raise TapeError("tape already consumed by backward; re-run the forward pass")
    tape._consumed = True
    _accum(loss, np.ones_like(loss.data))
    for out, backward_fn in reversed(tape._records):
        if out.grad is None:  # branch not on the path to the loss
            continue
        backward_fn(out.grad)


# ---------------------------------------------------------------------------
# primitives


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), bwd)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        _accum(a, g * s)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0  # subgradient 0 at the kink

    def bwd(g):
        _accum(a, g * mask)

    return _record(out, (a,), bwd)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    val = _sigmoid_values(a.data)
    out = Tensor(val)

    def bwd(g):
        _accum(a, g * val * (1.0 - val))

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        bad = float(a.data.min())
        raise DomainError(f"log: non-positive input {bad}; clamp probabilities before log")
    out = Tensor(np.log(a.data))

    def bwd(g):
        _accum(a, g / a.data)

    return _record(out, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only strictly inside the range."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _accum(a, g * inside)

    return _record(out, (a,), bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = Tensor(np.sum(a.data, axis=axis) / count)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy())

    return _record(out, (a,), bwd)


def select_positive(a: Tensor) -> Tensor:
    """Keep strictly positive entries, zero elsewhere; indicator is not differentiated."""
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))

    def bwd(g):
        _accum(a, g * mask)

    return _record(out, (a,), bwd)


def select_negative(a: Tensor) -> Tensor:
    """Keep strictly negative entries, zero elsewhere; indicator is not differentiated."""
    mask = a.data < 0.0
    out = Tensor(np.where(mask, a.data, 0.0))

    def bwd(g):
        _accum(a, g * mask)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeMismatchError("slice_cols", a.shape, (start, stop))
    out = Tensor(a.data[:, start:stop].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full)

    return _record(out, (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim < 1 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeMismatchError("slice_rows", a.shape, (start, stop))
    out = Tensor(a.data[start:stop].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _record(out, (a,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a per-column bias over the rows of a 2-D tensor.

    The only sanctioned broadcast in the engine: a bias vector repeated over
    spatial positions.
    """
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatchError("add_bias", x.shape, b.shape)
    out = Tensor(x.data + b.data[None, :])

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _record(out, (x, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: out[i, c] = x[i] . w[c] + b[c].

    Each output column is an independent (n,d) @ (d,) product, so the values
    in existing columns are bitwise-stable when rows are appended to ``w``.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("linear", x.shape, w.shape)
    if b.data.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeMismatchError("linear", w.shape, b.shape)
    n, heads = x.shape[0], w.shape[0]
    val = np.empty((n, heads))
    for c in range(heads):
        val[:, c] = x.data @ w.data[c]
    val += b.data[None, :]
    out = Tensor(val)

    def bwd(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        _accum(b, g.sum(axis=0))

    return _record(out, (x, w, b), bwd)


def pairwise_products(x: Tensor, w: Tensor) -> Tensor:
    """All elementwise feature/weight products: out[i, c, k] = x[i, k] * w[c, k].

    The materialized products are what the sign-selection primitives split
    into positive and negative parts.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("pairwise_products", x.shape, w.shape)
    out = Tensor(x.data[:, None, :] * w.data[None, :, :])

    def bwd(g):
        _accum(x, np.einsum("icd,cd->id", g, w.data, optimize=False))
        _accum(w, np.einsum("icd,id->cd", g, x.data, optimize=False))

    return _record(out, (x, w), bwd)


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """2-D convolution, stride 1, zero padding preserving H x W.

    ``x`` is (H, W, Cin), ``k`` is (kh, kw, Cin, Cout) with odd kh/kw,
    ``b`` is (Cout,). Implemented as im2col + matmul.
    """
    if x.data.ndim != 3 or k.data.ndim != 4 or x.shape[2] != k.shape[2]:
        raise ShapeMismatchError("conv2d", x.shape, k.shape)
    kh, kw, cin, cout = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("conv2d", k.shape, ("odd", "odd", cin, cout))
    if b.data.ndim != 1 or b.shape[0] != cout:
        raise ShapeMismatchError("conv2d", k.shape, b.shape)
    h, w = x.shape[0], x.shape[1]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # (H, W, Cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    val = cols @ kmat + b.data[None, :]
    out = Tensor(val.reshape(h, w, cout))

    def bwd(g):
        gm = g.reshape(h * w, cout)
        _accum(k, (cols.T @ gm).reshape(k.shape))
        _accum(b, gm.sum(axis=0))
        if x.requires_grad:
            gp = np.pad(g, ((ph, ph), (pw, pw), (0, 0)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(0, 1))
            gcols = np.ascontiguousarray(gwin.transpose(0, 1, 3, 4, 2)).reshape(
                h * w, kh * kw * cout
            )
            kflip = k.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            _accum(x, (gcols @ kflip).reshape(h, w, cin))

    return _record(out, (x, k, b), bwd)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Result of comparing analytic against central-difference gradients."""

    max_rel_err: float
    worst_index: tuple
    eps: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def check_gradients(
    f: Callable[[Tensor], Tensor],
    at: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``at`` against central differences.

    ``f`` must map a tensor to a scalar tensor and be deterministic (checked
    by evaluating twice). Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)`` per coordinate.
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")

    probe = Tensor(at.data.copy(), requires_grad=False)
    v0 = f(probe).item()
    v1 = f(probe).item()
    if v0 != v1:
        raise DomainError(f"check_gradients: f is not deterministic ({v0!r} != {v1!r})")

    x = Tensor(at.data.copy(), requires_grad=True)
    with Tape():
        y = f(x)
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(at.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = f(probe).item()
        flat[idx] = orig - eps
        fm = f(probe).item()
        flat[idx] = orig
        nflat[idx] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_err=float(rel.reshape(-1)[worst]),
        worst_index=np.unravel_index(worst, at.data.shape),
        eps=eps,
        tol=tol,
        analytic=analytic,
        numeric=numeric,
    )
