"""Dense float64 tensors and the tape-style reverse-mode engine.

Every primitive that touches a tensor with ``requires_grad`` appends a
:class:`Node` whose id comes from a process-wide counter, so sorting the
nodes reachable from a loss by id recovers the append order. The backward
pass walks that list in exact reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from safer.errors import ContractError, DomainError

_ids = itertools.count()
_state = threading.local()


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextmanager
def no_grad():
    """Run primitives without recording nodes (evaluation)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


@contextmanager
def debug_mode(enabled: bool = True):
    """Validate that every forward output and backward gradient is finite."""
    prev = _debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite values produced by {where}")


@dataclass
class Counters:
    """Instrumentation for cost accounting."""

    backward: int = 0  # full backward() calls (weight gradients)
    grad: int = 0  # functional grad() calls (attacks, sharpness)

    def reset(self) -> None:
        self.backward = 0
        self.grad = 0


counters = Counters()


class Node:
    """One recorded primitive application."""

    __slots__ = ("id", "op", "inputs", "backward_fn", "out")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable, out: "Tensor"):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out = out

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op})"


class Tensor:
    """A dense row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.require(arr, dtype=np.float64, requirements="C")
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) -----------------------------
    def __add__(self, other):
        from safer.autodiff import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from safer.autodiff import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from safer.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from safer.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from safer.autodiff import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from safer.autodiff import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from safer.autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from safer.autodiff import ops
        return ops.div(other, self)

    def __neg__(self):
        from safer.autodiff import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from safer.autodiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from safer.autodiff import ops
        return ops.slice_(self, key)

    def reshape(self, *shape):
        from safer.autodiff import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from safer.autodiff import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from safer.autodiff import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from safer.autodiff import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` and append a node if any input requires grad.

    ``backward_fn(g, needs, per_sample)`` returns one gradient (or None) per
    input. ``needs[j]`` says whether input ``j`` wants a gradient and
    ``per_sample[j]`` whether that gradient must keep a leading batch axis.
    """
    if _debug():
        check_finite(out_data, op)
    out = Tensor._wrap(out_data)
    if not getattr(_state, "no_grad", False) and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn, out)
    return out


@dataclass
class Graph:
    """Nodes reachable from one output, in append order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out._node] if out._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            for inp in node.inputs:
                if inp._node is not None and inp._node.id not in seen:
                    stack.append(inp._node)
        nodes.sort(key=lambda n: n.id)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        out: dict[int, Tensor] = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp._node is None and inp.requires_grad:
                    out.setdefault(id(inp), inp)
        return list(out.values())


def _run(loss: Tensor, targets: list[Tensor], per_sample: bool, retain_for: set[int]) -> dict[int, np.ndarray]:
    """Reverse sweep. Returns gradients keyed by ``id`` of each target."""
    graph = Graph.from_output(loss)
    target_ids = {id(t) for t in targets}
    leaf_targets = {id(t) for t in targets if t._node is None}

    # A node "reaches" a target if some path from its output leads back to one.
    reach: dict[int, bool] = {}
    for node in graph.nodes:
        r = id(node.out) in target_ids
        for inp in node.inputs:
            if id(inp) in target_ids or (inp._node is not None and reach.get(inp._node.id, False)):
                r = True
        reach[node.id] = r

    results: dict[int, np.ndarray] = {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if id(node.out) in retain_for:
            results[id(node.out)] = g
        if not reach[node.id]:
            continue
        needs = []
        ps = []
        for inp in node.inputs:
            if not inp.requires_grad:
                needs.append(False)
            elif inp._node is None:
                needs.append(id(inp) in leaf_targets)
            else:
                needs.append(reach.get(inp._node.id, False))
            ps.append(per_sample and needs[-1] and inp._node is None)
        in_grads = node.backward_fn(g, needs, ps)
        for inp, need, ig in zip(node.inputs, needs, in_grads):
            if not need:
                continue
            if ig is None:
                raise ContractError(f"{node.op} produced no gradient for a required input")
            if _debug():
                check_finite(ig, f"{node.op} backward")
            key = id(inp)
            if inp._node is None:
                prev = results.get(key)
                results[key] = ig if prev is None else prev + ig
            else:
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
    # A target that is the loss itself, with no node, still has a gradient.
    if id(loss) in target_ids and loss._node is None:
        results[id(loss)] = np.ones_like(loss.data)
    return results


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for requires-grad leaves.

    With ``inputs`` given, only those leaves receive gradients, and branches
    of the graph that cannot reach them are skipped.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ContractError("loss is not on a recorded graph")
    counters.backward += 1
    if inputs is None:
        leaves = Graph.from_output(loss).leaves()
    else:
        leaves = [t for t in inputs if t.requires_grad]
        for t in leaves:
            if t._node is not None:
                raise ContractError("backward inputs must be leaf tensors")
    res = _run(loss, leaves, per_sample=False, retain_for=set())
    for leaf in leaves:
        g = res.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        if leaf.grad is None:
            leaf.grad = g.reshape(leaf.shape).copy()
        else:
            leaf.grad = leaf.grad + g.reshape(leaf.shape)


def grad(loss: Tensor, wrt: Sequence[Tensor], per_sample: bool = False) -> list[np.ndarray]:
    """Return d(loss)/d(t) for each ``t`` in ``wrt`` without touching ``.grad``.

    ``wrt`` may hold leaves or intermediate tensors. With ``per_sample=True``
    leaf gradients keep a leading batch axis (shape ``[B, *leaf.shape]``);
    this is exact for models whose samples never interact before the loss
    and whose loss is a sum over samples.
    """
    if loss.data.size != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {loss.shape}")
    counters.grad += 1
    wrt = list(wrt)
    res = _run(loss, wrt, per_sample=per_sample, retain_for={id(t) for t in wrt if t._node is not None})
    out = []
    for t in wrt:
        g = res.get(id(t))
        if g is None:
            if per_sample and t._node is None:
                raise ContractError("per-sample gradient requested for a tensor the loss does not reach")
            g = np.zeros_like(t.data)
        out.append(g)
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
