"""Array container, operation tape and the reverse sweep."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Array:
    """Dense float64 array that can take part in reverse-mode differentiation.

    ``data`` is always a C-contiguous ``numpy.ndarray`` of dtype float64. Arrays
    created by operations while a :class:`Tape` is active inherit
    ``requires_grad`` from their inputs.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"array dims must be >= 1, got shape {arr.shape}")
        self.data = arr
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
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; the strict-shape rules of ops apply.
    def __add__(self, other):
        from . import ops

        return ops.add(self, as_array(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, as_array(other, like=self))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(as_array(other, like=self), self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, as_array(other, like=self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __getitem__(self, key):
        from . import ops

        return ops.index(self, key)


def as_array(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    if np.isscalar(x) and like is not None:
        return Array(np.full(like.shape, float(x)))
    return Array(x)


@dataclass
class Op:
    """One recorded primitive: inputs, output and its vector-Jacobian product."""

    name: str
    inputs: tuple[Array, ...]
    output: Array
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order, which is
    a valid topological order by construction.
    """

    def __init__(self):
        self.ops: list[Op] = []
        self.visits = 0
        self._finalized = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)
        self._finalized = True

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, op: Op) -> None:
        if self._finalized:
            raise ContractError("cannot record onto a finalized tape")
        self.ops.append(op)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside the block (nested tapes are hidden)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack[:] = self._saved


def record(name: str, inputs: tuple[Array, ...], out_data: np.ndarray, vjp) -> Array:
    """Wrap ``out_data`` and log the op if any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(a.requires_grad for a in inputs)
    out = Array(out_data, requires_grad=needs)
    if needs:
        tape.record(Op(name, inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Array, wrt: Iterable[Array] | None = None) -> dict[Array, np.ndarray]:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a mapping from every ``requires_grad`` leaf reached by the tape
    (plus everything in ``wrt``) to its gradient. Leaves the loss does not
    depend on map to zeros. Each recorded op is visited exactly once.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not tape._finalized:
        raise ContractError("tape must be finalized (leave the `with` block) before backward")

    produced = {id(op.output) for op in tape.ops}
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Array] = {}
    tape.visits = 0
    for op in reversed(tape.ops):
        tape.visits += 1
        g = adj.pop(id(op.output), None)
        if g is None:
            continue
        grads = op.vjp(g)
        for inp, gi in zip(op.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi

    out: dict[Array, np.ndarray] = {}
    for key, leaf in leaves.items():
        out[leaf] = np.asarray(adj[key]).reshape(leaf.shape)
    if id(loss) not in produced and loss.requires_grad:
        out[loss] = np.ones_like(loss.data)
    for w in wrt or ():
        if w not in out:
            out[w] = np.zeros_like(w.data)
    return out


def grad(fn: Callable[..., Array], *args: Array) -> list[np.ndarray]:
    """Gradient of scalar ``fn(*args)`` with respect to each argument."""
    leaves = [Array(a.data if isinstance(a, Array) else a, requires_grad=True) for a in args]
    with Tape() as tape:
        loss = fn(*leaves)
    grads = backward(tape, loss, wrt=leaves)
    return [grads[leaf] for leaf in leaves]
