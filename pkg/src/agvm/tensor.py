"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The operation set is the smallest one that supports the synthetic model
suite: matmul, add, multiply, relu, mean, reduce_sum, squared_error and
masked_select. Elementwise binaries broadcast only over a single leading
batch dimension (``[b, d] op [d]``); anything richer raises ShapeError.

Graph recording is thread-local: the first recorded operation on a thread
opens a fresh tape, later operations append to it, and a backward pass
consumes it. Distinct threads therefore build and consume independent
tapes, and may share leaf tensors as long as they only read them.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the attempted primitive."""


class TapeError(RuntimeError):
    """Tape misuse: consumed twice, or mixing tensors from different tapes."""


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Records are appended in execution order, so walking them in reverse
    visits the graph in reverse topological order. A tape is consumed by
    exactly one backward pass; reuse raises TapeError.
    """

    __slots__ = ("_records", "consumed")

    def __init__(self):
        self._records: list[tuple] = []
        self.consumed = False

    def record(self, out, inputs, pull):
        self._records.append((out, inputs, pull))

    def __len__(self):
        return len(self._records)


_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


def _open_tape(inputs):
    """Return the tape new records go to, validating input provenance."""
    tape = _active_tape()
    if tape is None or tape.consumed:
        tape = Tape()
        _LOCAL.tape = tape
    for x in inputs:
        if x.tape is not None and x.tape is not tape:
            raise TapeError(
                "input tensor belongs to a different or already-consumed tape; "
                "rebuild the graph from leaf tensors"
            )
    return tape


def relu_kink_seen() -> bool:
    """True if any relu on this thread saw an exactly-zero input since the last reset."""
    return getattr(_LOCAL, "relu_kink", False)


def reset_relu_kink():
    _LOCAL.relu_kink = False


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = getattr(_LOCAL, "no_grad", False)
        _LOCAL.no_grad = True
        return self

    def __exit__(self, *exc):
        _LOCAL.no_grad = self._prev
        return False


class Tensor:
    """Dense row-major float64 array with optional gradient tracking.

    ``data`` is always flat; ``shape`` carries the logical extents. ``grad``
    is allocated (flat, same length) by a backward pass for every tensor
    with requires_grad=True.
    """

    __slots__ = ("shape", "data", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.shape = tuple(arr.shape)
        self.data = np.ascontiguousarray(arr).reshape(-1)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @classmethod
    def _wrap(cls, flat: np.ndarray, shape: tuple) -> "Tensor":
        t = cls.__new__(cls)
        t.shape = shape
        t.data = flat
        t.requires_grad = False
        t.grad = None
        t.tape = None
        return t

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def value(self) -> np.ndarray:
        """The data viewed at its logical shape."""
        return self.data.reshape(self.shape)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.tape is not None for t in tensors)


def _emit(value: np.ndarray, inputs: tuple, pull: Callable) -> Tensor:
    """Wrap an op result, recording it when any input participates in a graph."""
    out = Tensor._wrap(np.ascontiguousarray(value).reshape(-1), tuple(value.shape))
    if not getattr(_LOCAL, "no_grad", False) and _tracked(*inputs):
        tape = _open_tape(inputs)
        out.requires_grad = True
        out.tape = tape
        tape.record(out, inputs, pull)
    return out


def _binary_layout(name: str, a: Tensor, b: Tensor):
    """Resolve elementwise shapes: equal, or one side broadcast over the
    other's single leading batch dimension. Returns (out_shape, reduce_a,
    reduce_b) where reduce_* means that side's gradient sums over axis 0."""
    if a.shape == b.shape:
        return a.shape, False, False
    if len(a.shape) == len(b.shape) + 1 and a.shape[1:] == b.shape:
        return a.shape, False, True
    if len(b.shape) == len(a.shape) + 1 and b.shape[1:] == a.shape:
        return b.shape, True, False
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform "
                     "(equal, or broadcast over one leading batch dimension)")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def pull(g):
        gm = g.reshape(out.shape)
        return (gm @ bv.T).reshape(-1), (av.T @ gm).reshape(-1)

    return _emit(out, (a, b), pull)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_shape, red_a, red_b = _binary_layout("add", a, b)
    out = a.value + b.value

    def pull(g):
        gm = g.reshape(out_shape)
        ga = gm.sum(axis=0).reshape(-1) if red_a else g.copy()
        gb = gm.sum(axis=0).reshape(-1) if red_b else g.copy()
        return ga, gb

    return _emit(out, (a, b), pull)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out_shape, red_a, red_b = _binary_layout("multiply", a, b)
    av, bv = a.value, b.value
    out = av * bv

    def pull(g):
        gm = g.reshape(out_shape)
        ga = gm * bv
        gb = gm * av
        if red_a:
            ga = ga.sum(axis=0)
        if red_b:
            gb = gb.sum(axis=0)
        return ga.reshape(-1), gb.reshape(-1)

    return _emit(out, (a, b), pull)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the derivative at exactly 0 is defined as 0."""
    if np.any(a.data == 0.0):
        _LOCAL.relu_kink = True
    keep = a.data > 0.0
    out = np.where(keep, a.data, 0.0).reshape(a.shape)

    def pull(g):
        return (g * keep,)

    return _emit(out, (a,), pull)


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, producing a scalar."""
    n = a.size
    out = np.asarray(a.data.mean())

    def pull(g):
        return (np.full(n, g[0] / n),)

    return _emit(out, (a,), pull)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum over all elements, producing a scalar."""
    n = a.size
    out = np.asarray(a.data.sum())

    def pull(g):
        return (np.full(n, g[0]),)

    return _emit(out, (a,), pull)


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of elementwise squared differences, producing a scalar."""
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error: shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = pred.size
    out = np.asarray(np.dot(diff, diff) / n)

    def pull(g):
        scale = 2.0 * g[0] / n
        gp = scale * diff
        return gp, -gp

    return _emit(out, (pred, target), pull)


def masked_select(a: Tensor, mask) -> Tensor:
    """Gather the elements of ``a`` where ``mask`` is true into a 1-D tensor.

    ``mask`` may be a boolean numpy array or a 0/1 Tensor of the same shape.
    The mask is a constant: no gradient flows to it.
    """
    if isinstance(mask, Tensor):
        if mask.requires_grad or mask.tape is not None:
            raise ShapeError("masked_select: mask must be a constant tensor")
        mask_flat = mask.data != 0.0
        mask_shape = mask.shape
    else:
        m = np.asarray(mask)
        mask_flat = m.reshape(-1).astype(bool)
        mask_shape = tuple(m.shape)
    if mask_shape != a.shape:
        raise ShapeError(f"masked_select: mask shape {mask_shape} does not match data shape {a.shape}")
    kept = a.data[mask_flat]
    if kept.size == 0:
        raise ShapeError("masked_select: mask keeps no elements")
    n = a.size

    def pull(g):
        ga = np.zeros(n)
        ga[mask_flat] = g
        return (ga, None)

    mask_input = mask if isinstance(mask, Tensor) else Tensor(mask_flat.astype(np.float64))
    return _emit(kept.reshape(kept.shape), (a, mask_input), pull)


def _walk(tape: Tape, loss: Tensor) -> dict:
    """Reverse pass over the tape. Returns {id(tensor): (tensor, flat grad)}."""
    grads = {id(loss): (loss, np.ones(1))}
    for out, inputs, pull in reversed(tape._records):
        got = grads.get(id(out))
        if got is None:
            continue
        for x, gx in zip(inputs, pull(got[1])):
            if gx is None or not (x.requires_grad or x.tape is not None):
                continue
            cur = grads.get(id(x))
            grads[id(x)] = (x, gx if cur is None else cur[1] + gx)
    return grads


def _consume(loss: Tensor) -> Tape:
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("backward: loss is not attached to a tape (no tracked inputs)")
    if tape.consumed:
        raise TapeError("backward: tape already consumed by a previous backward pass")
    tape.consumed = True
    if _active_tape() is tape:
        _LOCAL.tape = None
    return tape


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls (use zero_grad between passes
    when fresh gradients are needed). Consumes the tape.
    """
    tape = _consume(loss)
    for t, g in _walk(tape, loss).values():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching any ``.grad`` field.

    Thread-safe against other graphs sharing the same leaves; missing paths
    yield zeros. Consumes the tape like backward.
    """
    tape = _consume(loss)
    grads = _walk(tape, loss)
    out = []
    for p in wrt:
        got = grads.get(id(p))
        out.append(np.zeros(p.size) if got is None else got[1])
    return out


def pack_params(params: Sequence[Tensor]) -> np.ndarray:
    """Concatenate parameter data into one flat vector (copy)."""
    return np.concatenate([p.data for p in params]) if params else np.zeros(0)


def load_params(params: Sequence[Tensor], flat: np.ndarray):
    """Write a flat vector back into parameter tensors, in order."""
    offset = 0
    for p in params:
        p.data[:] = flat[offset:offset + p.size]
        offset += p.size
    if offset != flat.size:
        raise ShapeError(f"load_params: vector length {flat.size} != total parameter size {offset}")


def zero_grads(params: Sequence[Tensor]):
    for p in params:
        p.grad = None


def grad_check(model: Callable[[], Tensor], params: Sequence[Tensor],
               probe_count: int, step: float = 1e-6, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``model`` is a closure over ``params`` returning a scalar loss. Probes
    ``probe_count`` random coordinates of the requires_grad parameters and
    returns max |analytic - central| / max(1, |analytic|) over them.

    Probes whose evaluations hit a relu input at exactly 0 are skipped (the
    subgradient point has no meaningful finite difference); if every probe
    is skipped, or no parameter is trainable, the result is 0.0.
    """
    if probe_count < 1:
        raise ValueError("grad_check: probe_count must be >= 1")
    live = [p for p in params if p.requires_grad]
    coords = [(i, j) for i, p in enumerate(live) for j in range(p.size)]
    if not coords:
        return 0.0

    reset_relu_kink()
    loss = model()
    if not np.isfinite(loss.data[0]):
        raise ValueError("grad_check: model produced a non-finite loss")
    kink_at_base = relu_kink_seen()
    analytic = gradients(loss, live)

    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(probe_count, len(coords)), replace=False)
    worst = 0.0
    for c in picks:
        i, j = coords[c]
        p = live[i]
        saved = p.data[j]
        reset_relu_kink()
        with no_grad():
            p.data[j] = saved + step
            f_plus = model().data[0]
            p.data[j] = saved - step
            f_minus = model().data[0]
            p.data[j] = saved
        if kink_at_base or relu_kink_seen():
            continue
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError("grad_check: model produced a non-finite loss during probing")
        fd = (f_plus - f_minus) / (2.0 * step)
        a = analytic[i][j]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
