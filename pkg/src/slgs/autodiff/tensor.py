"""Tensor and tape for reverse-mode differentiation.

A ``Tape`` is opened as a context manager. While it is active, every op whose
inputs include a tracked tensor (``requires_grad=True`` or produced by a tracked
op) appends a node holding its backward closure. ``Tape.backward`` walks the
nodes once, in reverse order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError, StateError

_DTYPE = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the float type used for new tensors.

    Gradient checks run under ``precision(np.float64)`` so the finite-difference
    side is not dominated by float32 rounding.
    """
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node")

    # keep numpy from hijacking reflected operators (ndarray * Tensor)
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

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
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    tensor: Tensor | None = None  # kept for leaves only


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] | None = None
    _leaf_ids: dict[int, int] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _node_id(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            key = id(t)
            idx = self._leaf_ids.get(key)
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(Node("leaf", (), None, t.shape, tensor=t))
                self._leaf_ids[key] = idx
            return idx
        return None

    def record(self, op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        if self.gradients is not None:
            raise StateError("tape already consumed by backward(); open a new tape")
        ids = tuple(-1 if (nid := self._node_id(t)) is None else nid for t in inputs)
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(Node(op, ids, backward, out_data.shape))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self.gradients is not None:
            raise StateError("backward() already ran on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise StateError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss._node: np.ones(loss.shape, dtype=loss.data.dtype)}
        for idx in range(loss._node, -1, -1):
            node = self.nodes[idx]
            g = grads.get(idx)
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for nid, ig in zip(node.inputs, in_grads):
                if nid < 0 or ig is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = ig if prev is None else prev + ig
        self.gradients = grads
        for idx in self._leaf_ids.values():
            node = self.nodes[idx]
            g = grads.get(idx)
            node.tensor.grad = g if g is not None else np.zeros(node.shape, dtype=node.tensor.data.dtype)
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss with respect to any recorded tensor."""
        if self.gradients is None:
            raise StateError("backward() has not run on this tape")
        nid = t._node if t._tape is self else self._leaf_ids.get(id(t))
        if nid is None:
            raise StateError("tensor was not recorded on this tape")
        g = self.gradients.get(nid)
        return g if g is not None else np.zeros(t.shape, dtype=t.data.dtype)


def make_result(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as a tensor, recording on the active tape if any input is tracked."""
    out_data = np.ascontiguousarray(out_data, dtype=default_dtype()) if out_data.dtype != default_dtype() else out_data
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        return tape.record(op, out_data, inputs, backward)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    out._node = None
    return out
