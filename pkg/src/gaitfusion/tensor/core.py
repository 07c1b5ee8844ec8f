"""Tensor container, operation tape and reverse-mode sweep.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Without an active tape nothing is
recorded and outputs never require gradients, which is what inference uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense row-major array with optional gradient tracking.

    ``data`` is a numpy array of dtype float32 or float64.  ``grad`` is filled
    by :func:`backward` for leaf tensors (and tensors that called
    :meth:`retain_grad`) and always matches ``data`` in shape and dtype.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy float buffers keep their precision; Python numbers and lists become f32
            is_np = isinstance(data, (np.ndarray, np.generic))
            dtype = data.dtype if is_np and data.dtype in FLOAT_DTYPES else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        from . import ops

        return ops.cast(self, dtype)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in ops) ------------------------------
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

        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        from . import ops

        return ops.reduce("max", self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        from . import ops

        return ops.reduce("min", self, axis, keepdims)

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


BackwardFn = Callable[[Sequence[np.ndarray]], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, outputs and the rule mapping output
    gradients to input gradients."""

    name: str
    inputs: tuple
    outputs: tuple
    backward: BackwardFn
    tape: "Tape" = field(repr=False, default=None)


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager.  A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def record(self, name: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        node = Node(name, tuple(inputs), tuple(outputs), backward_fn, self)
        for out in outputs:
            out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def clear(self) -> None:
        """Drop every recorded node so intermediate buffers can be freed
        immediately instead of waiting for the cycle collector."""
        for node in self.nodes:
            for out in node.outputs:
                out._node = None
            node.backward = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


def record(name: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
    """Attach ``outputs`` to the active tape when any input needs a gradient."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    tape.record(name, inputs, outputs, backward_fn)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every gradient-tracking leaf.

    Leaves that appear on the tape but are not reachable from ``loss`` get a
    zero gradient so optimizers always see a well-defined buffer.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = loss._node.tape if loss._node is not None else None
    if tape is None:
        raise RuntimeError("loss was not produced under a tape")
    if loss._node is None or loss._node.tape is not tape:
        raise RuntimeError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    sinks: dict[int, Tensor] = {}
    retained: list[tuple[Tensor, np.ndarray]] = []

    for node in reversed(tape.nodes):
        out_grads = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        for o, g in zip(node.outputs, out_grads):
            if o._retain and g is not None:
                retained.append((o, g))
        out_grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, out_grads)]
        in_grads = node.backward(out_grads)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.name}: gradient shape {g.shape} != input shape {inp.shape}")
            key = id(inp)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
            if inp.is_leaf:
                sinks[key] = inp

    for t, g in retained:
        t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g

    for key, t in sinks.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g

    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.is_leaf and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
