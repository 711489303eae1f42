"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Graph` records every op executed on its :class:`Node` values in
execution order, which is a valid topological order by construction.
``Graph.backward`` walks the tape in reverse and returns gradients for the
named parameters bound to the graph.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError):
    def __init__(self, node_id: int, op: str, msg: str):
        super().__init__(f"node {node_id} ({op}): {msg}")
        self.node_id = node_id
        self.op = op


class NumericError(TensorError):
    def __init__(self, node_id: int, op: str, msg: str = "non-finite value"):
        super().__init__(f"node {node_id} ({op}): {msg}")
        self.node_id = node_id
        self.op = op


class StateError(TensorError):
    pass


BackwardFn = Callable[[np.ndarray], tuple]


class Node:
    """One recorded value on a graph tape."""

    __slots__ = ("graph", "id", "op", "value", "parents", "backward_fn", "param_name")

    def __init__(self, graph: "Graph", node_id: int, op: str, value: np.ndarray,
                 parents: tuple, backward_fn: BackwardFn | None, param_name: str | None = None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"

    # arithmetic sugar; all shape rules are those of the underlying ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Graph:
    """Execution tape.

    ``params`` maps names to live parameter arrays. Parameter nodes are
    created lazily by :meth:`param` and cached, so repeated uses of the same
    parameter accumulate gradient into one slot.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None,
                 dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.params = dict(params) if params is not None else {}
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}
        self._done = False

    # -- node creation -------------------------------------------------
    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, value: np.ndarray, parents: tuple = (),
                backward_fn: BackwardFn | None = None, param_name: str | None = None) -> Node:
        if self._done:
            raise StateError("graph already consumed by backward(); build a new graph")
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        node_id = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(node_id, op)
        node = Node(self, node_id, op, value, parents, backward_fn, param_name)
        self.nodes.append(node)
        return node

    def input(self, array, name: str | None = None) -> Node:
        return self._record("input" if name is None else f"input:{name}",
                            np.asarray(array, dtype=self.dtype))

    const = input

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            node = self._record("param", np.asarray(self.params[name], dtype=self.dtype),
                                param_name=name)
            self._param_nodes[name] = node
        return node

    def unused_params(self) -> list[str]:
        used = self._used if self._done else self._param_nodes
        return [k for k in self.params if k not in used]

    # -- differentiation -----------------------------------------------
    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every bound parameter.

        Parameters never touched by the forward pass get zero gradients.
        """
        if not self.nodes:
            raise StateError("backward called before forward")
        if self._done:
            raise StateError("backward already run on this graph")
        if not isinstance(loss, Node) or loss.graph is not self:
            raise StateError("loss node does not belong to this graph")
        if loss.value.size != 1:
            raise ShapeError(loss.id, loss.op, f"loss must be scalar, got {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or node.backward_fn is None:
                if g is not None and node.param_name is not None:
                    grads[node.id] = g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if pg.shape != parent.value.shape:
                    raise ShapeError(node.id, node.op,
                                     f"gradient shape {pg.shape} != input shape {parent.shape}")
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        out = {}
        for name, arr in self.params.items():
            node = self._param_nodes.get(name)
            g = grads.get(node.id) if node is not None else None
            out[name] = (np.zeros(np.shape(arr), dtype=self.dtype) if g is None
                         else np.asarray(g, dtype=self.dtype))
        self._done = True
        # drop the tape so activations are freed without waiting for the cycle collector
        self._used = set(self._param_nodes)
        self.nodes = []
        self._param_nodes = {}
        return out


def as_node(graph: Graph, x) -> Node:
    if isinstance(x, Node):
        return x
    return graph.const(x)


def param_checksum(params: Mapping[str, np.ndarray]) -> str:
    """Stable SHA-256 over parameter names, shapes and float32 bytes."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4", order="C")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def numeric_grad(fn: Callable[[Mapping[str, np.ndarray]], float],
                 params: Mapping[str, np.ndarray], h: float = 1e-3,
                 names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays (float64)."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name in (names if names is not None else base):
        arr = base[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(base)
            flat[i] = orig - h
            fm = fn(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = grad
    return out
