"""Dense f64 tensors with a reverse-mode gradient tape.

Every differentiable primitive in :mod:`dcss_nas.tensor.ops` produces its
output through :func:`record`, which attaches a :class:`Node` holding the
inputs and a backward rule. :func:`backward` linearizes the graph behind a
scalar loss into a :class:`Tape`, replays it in reverse, accumulates into
the ``grad`` buffers of leaf tensors and frees the tape.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Union

import numpy as np

from dcss_nas.errors import ShapeError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    Array = NDArray[np.float64]

Operand = Union["Tensor", float, int]
BackwardFn = Callable[["np.ndarray[Any, Any]"], Sequence["np.ndarray[Any, Any] | None"]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording any operation on the tape."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@dataclass(eq=False)
class Node:
    """One recorded primitive: its inputs and the rule mapping dL/dout to dL/dinputs."""

    op: str
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tensor:
    """Dense N-dimensional f64 array optionally participating in the tape.

    Feature maps are NCHW. Only leaf tensors (parameters and inputs created
    by the user) retain ``grad`` after :func:`backward`; intermediate
    results hand their gradient on and drop it.
    """

    __slots__ = ("_node", "data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name
        self._node: Node | None = None

    @classmethod
    def wrap(cls, data: Array, *, requires_grad: bool = False) -> Tensor:
        """Adopt an f64 array without copying it."""
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._node = None
        return out

    # -- inspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar (delegates to ops) --------------------------------

    def __add__(self, other: Operand) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.add(self, as_tensor(other))

    def __radd__(self, other: Operand) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.add(as_tensor(other), self)

    def __sub__(self, other: Operand) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.sub(self, as_tensor(other))

    def __rsub__(self, other: Operand) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.sub(as_tensor(other), self)

    def __mul__(self, other: Operand) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.mul(self, as_tensor(other))

    def __rmul__(self, other: Operand) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.mul(as_tensor(other), self)

    def __neg__(self) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.mul(self, as_tensor(-1.0))

    def sum(self) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.sum(self)

    def mean(self) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.mean(self)

    def reshape(self, *shape: int) -> Tensor:
        from dcss_nas.tensor import ops

        return ops.reshape(self, shape)


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(op: str, data: Array, inputs: Sequence[Tensor], rule: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op`` and put it on the tape."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor.wrap(data, requires_grad=needs_grad)
    if needs_grad and _grad_enabled.get():
        out._node = Node(op, tuple(inputs), rule)
    return out


class Tape:
    """The primitives behind one loss, in topological order (inputs first)."""

    def __init__(self, entries: list[Tensor]) -> None:
        self.entries = entries

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        # iterative post-order DFS; supernet graphs exceed the recursion limit
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in reversed(tensor._node.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.entries)

    def ops(self) -> list[str]:
        return [t._node.op for t in self.entries if t._node is not None]

    def replay(self, loss: Tensor) -> None:
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for tensor in reversed(self.entries):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            input_grads = node.backward(g)
            for parent, pg in zip(node.inputs, input_grads, strict=True):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def free(self) -> None:
        for tensor in self.entries:
            tensor._node = None
        self.entries = []


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate (``+=``) into existing buffers. The tape is freed
    afterwards, so a second call on the same loss finds nothing to replay.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", "loss size", 1, loss.data.size)
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the tape (no input requires grad)")
    tape = Tape.from_loss(loss)
    tape.replay(loss)
    tape.free()
    return tape
