"""Tensor value type and the define-by-run gradient tape.

A :class:`GradTape` is opened with a ``with`` block.  Every differentiable
primitive applied inside the block, to at least one input that requires a
gradient, appends a :class:`Node` to the innermost open tape.  :func:`backward`
then replays the tape in exact reverse order.

Outside of any tape nothing is recorded, which makes inference cheap.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Storage is float32 everywhere in the library; gradient checks switch to
    float64 so that finite differences are not swamped by rounding.
    """
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """Dense n-dimensional float array with gradient bookkeeping.

    Tensors are treated as immutable once an operation has produced them.
    ``requires_grad`` marks parameters and any leaf that opts in to receiving
    a gradient; it propagates to every result computed from such a tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        dtype = default_dtype()
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import functional as F

        return F.add(self, F.neg(as_tensor(other)))

    def __rsub__(self, other):
        from . import functional as F

        return F.add(F.neg(self), other)

    def __neg__(self):
        from . import functional as F

        return F.neg(self)

    def __pow__(self, exponent: float):
        from . import functional as F

        return F.pow_scalar(self, exponent)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    """One primitive application on the tape."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class GradTape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._open = False

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        self._open = True
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)
        self._open = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. arbitrary tensors recorded on this tape.

        Parameter ``.grad`` fields are populated as a side effect, as with
        :func:`backward`.
        """
        return backward(self, loss, sources=sources)


def _tape_stack() -> list[GradTape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_result(op: str, data: np.ndarray, inputs: Iterable[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op`` and record it if needed."""
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(Node(op, inputs, out, vjp))
    return out


def backward(tape: GradTape, loss: Tensor, sources: Sequence[Tensor] | None = None):
    """Propagate d(loss) back through ``tape``.

    Every leaf that requires a gradient gets its total derivative stored in
    ``.grad``.  If ``sources`` is given, their gradients (zeros when the loss
    does not depend on them) are returned in the same order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep = {id(s) for s in sources} if sources is not None else set()
    kept: dict[int, np.ndarray] = {}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        key = id(node.output)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        if key in keep:
            kept[key] = g
        input_grads = node.vjp(g)
        for tensor, gi in zip(node.inputs, input_grads):
            if gi is None or not tensor.requires_grad:
                continue
            if gi.shape != tensor.shape:
                raise DimensionError(
                    f"{node.op}: gradient shape {gi.shape} does not match input {tensor.shape}"
                )
            tid = id(tensor)
            leaves[tid] = tensor
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi

    for tid, g in grads.items():
        if tid in keep:
            kept[tid] = g
        tensor = leaves.get(tid)
        if tensor is not None and tid not in produced:
            tensor.grad = g.astype(tensor.data.dtype, copy=False)

    if sources is None:
        return None
    return [kept.get(id(s), np.zeros_like(s.data)) for s in sources]
