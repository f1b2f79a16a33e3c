"""Dense tensors with graph-recorded reverse-mode differentiation.

Every differentiable op in :mod:`triformer.ops` produces its output through
:func:`record`, which attaches a :class:`Node` holding the op's inputs and its
vector-Jacobian rule. :func:`backward` linearises the reachable graph into a
:class:`Tape` (topological order), replays it in reverse, and then releases
the graph, so a tape is consumed by exactly one backward pass.

Multiply-accumulate counting is a separate, opt-in mode (:func:`counting`)
used by the complexity accountant.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


class Tensor:
    """N-D float array with an optional gradient slot.

    Arrays are stored row-major and contiguous. Integer or bool input is
    promoted to the default float dtype (single precision).
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.type in _FLOAT_TYPES else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{rg})"

    # -- gradient helpers ----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same buffer, no graph linkage."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._node = None
        t.name = self.name
        return t

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    # -- operator sugar (implemented in ops) -----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs, its output, and the VJP rule."""

    op: str
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ops reachable from a loss, inputs always before consumers."""

    entries: list[tuple[Node, Tensor]] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[tuple[Node, Tensor]] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion blows up on deep nets
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append((node, t))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.entries)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and attach the graph node if any input needs grad."""
    check_finite(out, op)
    t = Tensor(out)
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._node = Node(op, tuple(inputs), vjp)
    return t


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls; clear them with :func:`zero_grad`.
    The graph is released afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise UsageError("loss is not recorded on a tape (already consumed, or no input requires grad)")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise DimensionError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            if inp._node is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for node, out in tape.entries:
        # released intermediates are plain values now, not leaves
        out._node = None
        out.requires_grad = False


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# multiply-accumulate counting mode


class OpCounter:
    """Per-scope tallies of MACs and auxiliary element ops.

    ``kind`` is ``"mac"`` for matmul/conv, ``"exp"`` for softmax
    exponentials and ``"norm"`` for normalised elements.
    """

    def __init__(self):
        self.counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        self._scope: list[str] = []

    @property
    def macs(self) -> int:
        return sum(c["mac"] for c in self.counts.values())

    def total(self, kind: str = "mac") -> int:
        return sum(c[kind] for c in self.counts.values())

    def add(self, kind: str, n: int) -> None:
        self.counts[".".join(self._scope)][kind] += int(n)

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()


@contextlib.contextmanager
def counting() -> Iterator[OpCounter]:
    prev = _get("counter", None)
    c = OpCounter()
    _state.counter = c
    try:
        yield c
    finally:
        _state.counter = prev


def count(kind: str, n: int) -> None:
    c = _get("counter", None)
    if c is not None:
        c.add(kind, n)


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Label op counts issued inside the block; no-op when not counting."""
    c = _get("counter", None)
    if c is None:
        yield
        return
    with c.scope(name):
        yield
