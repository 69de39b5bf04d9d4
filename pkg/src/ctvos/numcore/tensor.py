"""Tensor container, precision switch and the recording tape."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {32: np.float32, 64: np.float64}
_precision = 32
_active_tapes: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


def set_precision(bits: int) -> None:
    """Select the global element precision (32 or 64 bits)."""
    global _precision
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision = bits


def get_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _precision
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """Dense row-major array with an optional gradient requirement.

    Hashing is by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        dtype = get_dtype()
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records differentiable operations in execution order.

    Use as a context manager around the forward pass, then call
    :meth:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, self)


def record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Finite-check ``out`` and register it on the active tape if needed."""
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced (output shape {out.shape})")
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape``.

    Returns one gradient per leaf tensor that requires grad and was used under
    the tape (tensors that no recorded op produced).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.out) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    tape.nodes.clear()

    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        out[t] = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)
    return out
