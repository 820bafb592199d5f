"""Dense tensors on numpy storage with reverse-mode automatic differentiation.

Every differentiable operation records a node on the active :class:`Tape` in
execution order, which is already a topological order.  Walking the tape
backwards once propagates adjoints; fan-out accumulates additively.  Without
an active tape the same functions run as plain numpy, which is what
evaluation-mode forward passes use.

Numeric precision is a process-wide mode ("f32" or "f64") so that gradient
oracles can run in float64 while training stays in float32.  A tape and the
tensors recorded on it belong to a single thread; independent tapes may live
on different threads.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "set_precision",
    "get_precision",
    "get_dtype",
    "precision",
    "backward",
    "grad_check",
    "elementwise",
    "add",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "scale",
    "sum_all",
    "concat",
    "slice_channels",
    "take0",
    "stack0",
    "mul_const",
    "add_const",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _ThreadState(threading.local):
    def __init__(self):
        self.mode = "f32"
        self.tape: Optional["Tape"] = None


_state = _ThreadState()


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _state.mode = mode


def get_precision() -> str:
    return _state.mode


def get_dtype() -> type:
    return _DTYPES[_state.mode]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the numeric mode for the current thread."""
    prev = _state.mode
    set_precision(mode)
    try:
        yield
    finally:
        _state.mode = prev


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``data`` is row-major numpy storage in the current precision.  ``grad``
    is populated by :meth:`Tape.backward` for every tensor with
    ``requires_grad`` reachable from the loss, and accumulates across
    backward calls until reset to ``None``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad)


def _scalar_err(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def _from_data(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = False
    return out


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations, replayed in reverse for gradients."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _state.tape is not None:
            raise RuntimeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(tensor) to every requires_grad tensor.

        The adjoint of ``loss`` is seeded to one.  Each node is visited
        exactly once, in reverse recording order; results are added into the
        ``grad`` fields so repeated calls accumulate.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        needed = {id(loss)}
        chain = []
        for node in reversed(self._nodes):
            if id(node.output) in needed:
                chain.append(node)
                for t in node.inputs:
                    if t.requires_grad:
                        needed.add(id(t))
        adj = {id(loss): np.ones_like(loss.data)}
        touched = {id(loss): loss}
        for node in chain:
            out_g = adj.get(id(node.output))
            if out_g is None:
                continue
            grads = node.backward_fn(out_g)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                held = adj.get(id(t))
                adj[id(t)] = g if held is None else held + g
                touched[id(t)] = t
        for tid, t in touched.items():
            g = adj[tid]
            t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run backward on the tape active for this thread."""
    if _state.tape is None:
        raise RuntimeError("backward called with no active tape")
    _state.tape.backward(loss)


def _record(inputs: tuple, out: Tensor, backward_fn: Callable) -> Tensor:
    tape = _state.tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(inputs, out, backward_fn))
    return out


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{name}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    out = _from_data(a.data + b.data)

    def bwd(g):
        return (g, g)

    return _record((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    out = _from_data(a.data * b.data)

    def bwd(g):
        return (g * b.data, g * a.data)

    return _record((a, b), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    out = _from_data(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record((x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _from_data(t)

    def bwd(g):
        return (g * (1.0 - t * t),)

    return _record((x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = _from_data(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _record((x,), out, bwd)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``add`` and ``mul`` take two same-shape operands; ``sigmoid``, ``tanh``
    and ``relu`` take one.  No implicit broadcasting.
    """
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} takes a single operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = _from_data(x.data * np.asarray(c, dtype=x.data.dtype))

    def bwd(g):
        return (g * c,)

    return _record((x,), out, bwd)


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array of the same shape."""
    arr = np.asarray(arr, dtype=x.data.dtype)
    if arr.shape != x.data.shape:
        raise ValueError(f"mul_const: shapes {x.data.shape} and {arr.shape} differ")
    out = _from_data(x.data * arr)

    def bwd(g):
        return (g * arr,)

    return _record((x,), out, bwd)


def add_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise add a constant array of the same shape."""
    arr = np.asarray(arr, dtype=x.data.dtype)
    if arr.shape != x.data.shape:
        raise ValueError(f"add_const: shapes {x.data.shape} and {arr.shape} differ")
    out = _from_data(x.data + arr)

    def bwd(g):
        return (g,)

    return _record((x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = _from_data(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# shape plumbing: concatenation, slicing, sequence packing


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ValueError("concat of an empty sequence")
    nd = ts[0].ndim
    for t in ts[1:]:
        if t.ndim != nd:
            raise ValueError("concat: tensors must share rank")
    out = _from_data(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for k in range(len(ts)):
            sl = [slice(None)] * nd
            sl[axis] = slice(offsets[k], offsets[k + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _record(ts, out, bwd)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice the trailing axis; the adjoint scatters back into zeros."""
    c = x.data.shape[-1]
    if not (0 <= lo < hi <= c):
        raise ValueError(f"slice_channels: [{lo}, {hi}) out of range for {c} channels")
    out = _from_data(np.ascontiguousarray(x.data[..., lo:hi]))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[..., lo:hi] = g
        return (full,)

    return _record((x,), out, bwd)


def take0(x: Tensor, i: int) -> Tensor:
    """Select index ``i`` along the first axis."""
    n = x.data.shape[0]
    if not (0 <= i < n):
        raise ValueError(f"take0: index {i} out of range for length {n}")
    out = _from_data(np.ascontiguousarray(x.data[i]))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    return _record((x,), out, bwd)


def stack0(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = tuple(tensors)
    if not ts:
        raise ValueError("stack0 of an empty sequence")
    shape = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != shape:
            raise ValueError(f"stack0: shapes {shape} and {t.data.shape} differ")
    out = _from_data(np.stack([t.data for t in ts]))

    def bwd(g):
        return tuple(np.ascontiguousarray(g[k]) for k in range(len(ts)))

    return _record(ts, out, bwd)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare the taped gradient of ``f`` at ``x`` against central differences.

    Returns the worst relative error ``|a - n| / max(1, |a|, |n|)`` over all
    coordinates of ``x``.  Runs in float64 regardless of the ambient mode;
    ``f`` must be built from float64 tensors for the comparison to be
    meaningful at the default tolerances.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"grad_check step must lie in [1e-7, 1e-4], got {eps}")
    with precision("f64"):
        probe = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            y = f(probe)
            if y.data.size != 1:
                raise ValueError("grad_check requires a scalar-valued function")
            tape.backward(y)
        analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad
        flat = probe.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            kept = flat[i]
            flat[i] = kept + eps
            hi = float(f(probe).data)
            flat[i] = kept - eps
            lo = float(f(probe).data)
            flat[i] = kept
            numeric[i] = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
