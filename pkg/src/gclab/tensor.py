"""Immutable f64 tensors and the recording tape.

Operations (see :mod:`gclab.ops`) append a :class:`Node` to the tape that is
active in the current context. Without an active tape they simply compute
(inference mode).

    with Tape() as tape:
        loss = ops.sum(ops.relu(x))
    grads = backward(tape, loss)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from .errors import ContractError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "gclab_active_tape", default=None
)


class Tensor:
    """Dense row-major float64 array. The buffer is read-only."""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"all dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = _c_array(arr)
        arr.flags.writeable = False
        t.data = arr
        t.name = None
        return t

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _c_array(arr) -> np.ndarray:
    # C layout keeps reduction order, and so the bits, independent of history
    arr = np.asarray(arr, dtype=np.float64)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def rng_tensor(seed: int, shape: Sequence[int], dist: str = "uniform", **kw) -> Tensor:
    """Deterministic random tensor; see :func:`gclab.rng.sample`."""
    return Tensor._wrap(rng.sample(seed, shape, dist, **kw))


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # forward(*input_arrays) -> output array; used for replay
    forward: Callable[..., np.ndarray]
    # vjp(grad_out, *input_arrays, out_array) -> tuple of input grads (None = no grad)
    vjp: Callable[..., tuple]


class Tape:
    """Ordered op record. Confined to one logical thread of execution."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def replay(self) -> bool:
        """Recompute every node from the leaves; True if all outputs are bit-identical."""
        values: dict[int, np.ndarray] = {}
        ok = True
        for n in self.nodes:
            args = [values.get(id(t), t.data) for t in n.inputs]
            out = _c_array(n.forward(*args))
            values[id(n.output)] = out
            if out.shape != n.output.shape or out.tobytes() != n.output.data.tobytes():
                ok = False
        return ok


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def no_tape():
    """Context manager that suspends recording."""
    return _NoTape()


class _NoTape:
    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def apply(op: str, forward: Callable[..., np.ndarray], vjp: Callable[..., tuple],
          *inputs: Tensor) -> Tensor:
    out = Tensor._wrap(forward(*[t.data for t in inputs]))
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(Node(op, inputs, out, forward, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep. Returns a gradient for every leaf on the tape.

    Leaves the loss does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar tensor, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for n in reversed(tape.nodes):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        in_grads = n.vjp(g, *[t.data for t in n.inputs], n.output.data)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    return {t: grads.get(id(t), np.zeros(t.shape)) for t in tape.leaves()}
