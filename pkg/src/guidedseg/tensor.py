"""Dense float32 tensors with a replayable reverse-mode tape.

A forward pass records one node per differentiable operation on the
active tape; `backward` replays the nodes in reverse execution order and
accumulates vector-Jacobian products. Tensors that appear on a tape are
never mutated in place, so a tape can be replayed repeatedly with
identical results.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A dense n-dimensional float32 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def zeros(shape: Sequence[int] | tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


class _Node:
    """One recorded operation: output, inputs, and the VJP closure."""

    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 vjp: Callable[[Array], tuple[Optional[Array], ...]]):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations, replayable in reverse.

    Used as a context manager; ops executed inside the block are recorded
    when their output needs gradients. Tapes are confined to one thread.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, inputs: Iterable[Tensor],
               vjp: Callable[[Array], tuple[Optional[Array], ...]]) -> None:
        self._nodes.append(_Node(output, tuple(inputs), vjp))


def record_op(output: Tensor, inputs: Sequence[Tensor],
              vjp: Callable[[Array], tuple[Optional[Array], ...]]) -> Tensor:
    """Mark `output` as produced from `inputs`, recording on the active tape.

    The output needs gradients iff any input does; with no active tape the
    forward value is returned untouched (inference mode).
    """
    output.requires_grad = any(t.requires_grad for t in inputs)
    if output.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(output, inputs, vjp)
    return output


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Array]:
    """Accumulate gradients of `loss` w.r.t. every requires_grad tensor on `tape`.

    Returns a mapping tensor -> gradient array and assigns each tensor's
    `.grad` (tensors recorded on the tape but not on the path from the loss
    get zeros). Running backward twice on the same tape yields identical
    gradients because results are assigned, not accumulated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for node in reversed(tape._nodes):
        for t in node.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
        g_out = flowing.get(id(node.output))
        if g_out is None:
            continue
        grads_in = node.vjp(g_out)
        for t, g in zip(node.inputs, grads_in):
            if g is None or not t.requires_grad:
                continue
            acc = flowing.get(id(t))
            if acc is None:
                # private copy: vjps may alias g across inputs or return views
                flowing[id(t)] = np.array(g, dtype=np.float32)
            else:
                acc += g

    result: dict[Tensor, Array] = {}
    if loss.requires_grad:
        seen.setdefault(id(loss), loss)
    for tid, t in seen.items():
        g = flowing.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result


def prod(shape: Sequence[int]) -> int:
    return math.prod(shape)
