"""Tensor and tape for the reverse-mode engine.

Every op that has at least one input with ``requires_grad`` attaches an
:class:`OpRecord` to its output. ``Graph.from_root`` linearises the records
reachable from a scalar root into topological order, and :func:`backward`
walks that list once in reverse.

Leaves accumulate into ``.grad``; calling ``backward`` twice without
``zero_grad`` adds the second gradient to the first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import UsageError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.record: OpRecord | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output_id: int  # an id, not the tensor: tensor -> record -> tensor would be a cycle
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self):
        return tuple(t.node_id for t in self.inputs)


def make_output(data: np.ndarray, kind: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = OpRecord(kind, tuple(inputs), out.node_id, backward_fn)
    return out


class Graph:
    """Topologically ordered op records reachable from a root tensor."""

    def __init__(self, records: list[OpRecord]):
        self.records = records

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[OpRecord] = []
        seen: set[int] = set()
        # iterative post-order DFS; deep nets would overflow recursion
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            rec = node.record
            if rec is None:
                continue
            if expanded:
                order.append(rec)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for inp in reversed(rec.inputs):
                if inp.record is not None and inp.node_id not in seen:
                    stack.append((inp, False))
        return cls(order)


def backward(root: Tensor, graph: Graph | None = None) -> Graph:
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if graph is None:
        graph = Graph.from_root(root)
    if root.record is None:
        if root.requires_grad:
            _accumulate_leaf(root, np.ones_like(root.data))
        return graph

    pending: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for rec in reversed(graph.records):
        g = pending.pop(rec.output_id, None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.record is None:
                _accumulate_leaf(inp, ig)
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + ig
            else:
                pending[inp.node_id] = ig
    return graph


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
