"""Reverse-mode autodiff over a recorded computation graph.

Values are dense float64 numpy arrays. A Graph is a flat list of nodes in
creation order (parents always precede children), built define-by-run: every
op computes its forward value immediately and appends one node. backward()
walks the node list in reverse and accumulates vector-Jacobian products, so
the gradient of a scalar output is available with respect to *any* recorded
node, not just leaves. Nodes flagged stop_grad pass their forward value
through but block gradient flow to their parents.
"""

from __future__ import annotations

import numpy as np

NodeId = int


class GraphError(Exception):
    """Invalid graph usage (bad seed node, unknown op, bad index)."""


class ShapeMismatchError(GraphError):
    """Operand shapes invalid for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("kind", "parents", "value", "stop_grad", "scalar", "index", "axis")

    def __init__(self, kind, parents, value, stop_grad=False, scalar=None, index=None, axis=None):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.stop_grad = stop_grad
        self.scalar = scalar
        self.index = index
        self.axis = axis


class Graph:
    """A recorded forward computation. Single-writer; values are immutable."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def value(self, nid: NodeId) -> np.ndarray:
        return self.nodes[nid].value

    def _append(self, node: Node) -> NodeId:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _check(self, nid: NodeId, op: str) -> Node:
        if not 0 <= nid < len(self.nodes):
            raise GraphError(f"{op}: unknown node id {nid}")
        return self.nodes[nid]

    # -- leaves --------------------------------------------------------

    def input(self, x) -> NodeId:
        return self._append(Node("input", (), _as_value(x)))

    def parameter(self, x) -> NodeId:
        return self._append(Node("parameter", (), _as_value(x)))

    def constant(self, x) -> NodeId:
        return self._append(Node("input", (), _as_value(x)))

    # -- elementwise / linear ops --------------------------------------

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._check(a, "add").value, self._check(b, "add").value
        try:
            out = va + vb
        except ValueError:
            raise ShapeMismatchError("add", va.shape, vb.shape) from None
        return self._append(Node("add", (a, b), out))

    def subtract(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._check(a, "subtract").value, self._check(b, "subtract").value
        try:
            out = va - vb
        except ValueError:
            raise ShapeMismatchError("subtract", va.shape, vb.shape) from None
        return self._append(Node("subtract", (a, b), out))

    def multiply(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._check(a, "multiply").value, self._check(b, "multiply").value
        try:
            out = va * vb
        except ValueError:
            raise ShapeMismatchError("multiply", va.shape, vb.shape) from None
        return self._append(Node("multiply", (a, b), out))

    def scale(self, a: NodeId, c: float) -> NodeId:
        va = self._check(a, "scale").value
        return self._append(Node("scale", (a,), va * float(c), scalar=float(c)))

    def matmul(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._check(a, "matmul").value, self._check(b, "matmul").value
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise ShapeMismatchError("matmul", va.shape, vb.shape)
        return self._append(Node("matmul", (a, b), va @ vb))

    def relu(self, a: NodeId) -> NodeId:
        va = self._check(a, "relu").value
        return self._append(Node("relu", (a,), np.maximum(va, 0.0)))

    # -- reductions ----------------------------------------------------

    def reduce_sum(self, a: NodeId, axis=None) -> NodeId:
        va = self._check(a, "reduce_sum").value
        return self._append(Node("reduce_sum", (a,), np.sum(va, axis=axis), axis=axis))

    def reduce_max(self, a: NodeId, axis=None) -> NodeId:
        va = self._check(a, "reduce_max").value
        if va.size == 0:
            raise ShapeMismatchError("reduce_max", va.shape)
        return self._append(Node("reduce_max", (a,), np.max(va, axis=axis), axis=axis))

    def logsumexp(self, a: NodeId) -> NodeId:
        """log(sum(exp(a))) over the last axis, max-stabilized."""
        va = self._check(a, "logsumexp").value
        if va.ndim == 0 or va.shape[-1] == 0:
            raise ShapeMismatchError("logsumexp", va.shape)
        m = np.max(va, axis=-1, keepdims=True)
        out = np.squeeze(m, axis=-1) + np.log(np.sum(np.exp(va - m), axis=-1))
        return self._append(Node("logsumexp", (a,), out))

    def select(self, a: NodeId, *index) -> NodeId:
        """Gather components a[index]; index arrays may have any common shape."""
        va = self._check(a, "select").value
        if len(index) != va.ndim:
            raise ShapeMismatchError("select", va.shape, tuple(np.shape(i) for i in index))
        idx = tuple(np.asarray(i, dtype=np.intp) for i in index)
        try:
            out = va[idx]
        except IndexError as e:
            raise GraphError(f"select: index out of range for shape {va.shape}: {e}") from None
        return self._append(Node("select", (a,), out, index=idx))

    def stop_gradient(self, a: NodeId) -> NodeId:
        """Identity forward; backward treats the subexpression as constant."""
        va = self._check(a, "stop_gradient").value
        return self._append(Node("stop_gradient", (a,), va, stop_grad=True))

    # -- generic recording surface --------------------------------------

    def record(self, kind: str, parents=(), **payload) -> NodeId:
        """Record one op by kind name; same shape rules as the named methods."""
        ops = {
            "input": self.input, "parameter": self.parameter,
            "add": self.add, "subtract": self.subtract, "multiply": self.multiply,
            "scale": self.scale, "matmul": self.matmul, "relu": self.relu,
            "reduce_sum": self.reduce_sum, "reduce_max": self.reduce_max,
            "logsumexp": self.logsumexp, "select": self.select,
            "stop_gradient": self.stop_gradient,
        }
        if kind not in ops:
            raise GraphError(f"record: unknown op kind {kind!r}")
        if kind in ("input", "parameter"):
            return ops[kind](payload["value"])
        args = list(parents)
        if kind == "select":
            args += list(payload.pop("index"))
        return ops[kind](*args, **payload)


# -- backward ------------------------------------------------------------


def _vjp(node: Node, g: np.ndarray, nodes: list[Node]):
    """Yield (parent_id, gradient contribution) pairs for one node."""
    kind = node.kind
    p = node.parents
    if kind in ("input", "parameter"):
        return
    if kind == "stop_gradient":
        return
    if kind == "add":
        yield p[0], _unbroadcast(g, nodes[p[0]].value.shape)
        yield p[1], _unbroadcast(g, nodes[p[1]].value.shape)
    elif kind == "subtract":
        yield p[0], _unbroadcast(g, nodes[p[0]].value.shape)
        yield p[1], _unbroadcast(-g, nodes[p[1]].value.shape)
    elif kind == "multiply":
        va, vb = nodes[p[0]].value, nodes[p[1]].value
        yield p[0], _unbroadcast(g * vb, va.shape)
        yield p[1], _unbroadcast(g * va, vb.shape)
    elif kind == "scale":
        yield p[0], g * node.scalar
    elif kind == "matmul":
        va, vb = nodes[p[0]].value, nodes[p[1]].value
        yield p[0], g @ vb.T
        yield p[1], va.T @ g
    elif kind == "relu":
        yield p[0], g * (nodes[p[0]].value > 0.0)
    elif kind == "reduce_sum":
        va = nodes[p[0]].value
        if node.axis is None:
            yield p[0], np.broadcast_to(g, va.shape).copy() if va.shape else g
        else:
            yield p[0], np.broadcast_to(np.expand_dims(g, node.axis), va.shape).copy()
    elif kind == "reduce_max":
        va = nodes[p[0]].value
        out = np.zeros_like(va)
        if node.axis is None:
            # ties resolve to the first maximal element in row-major order
            out.flat[int(np.argmax(va))] = g
        else:
            idx = np.expand_dims(np.argmax(va, axis=node.axis), node.axis)
            np.put_along_axis(out, idx, np.expand_dims(g, node.axis), axis=node.axis)
        yield p[0], out
    elif kind == "logsumexp":
        va = nodes[p[0]].value
        m = np.max(va, axis=-1, keepdims=True)
        e = np.exp(va - m)
        soft = e / np.sum(e, axis=-1, keepdims=True)
        yield p[0], soft * np.expand_dims(g, -1)
    elif kind == "select":
        va = nodes[p[0]].value
        out = np.zeros_like(va)
        np.add.at(out, node.index, g)
        yield p[0], out
    else:  # pragma: no cover
        raise GraphError(f"backward: no vjp for op kind {kind!r}")


def backward(graph: Graph, seed: NodeId, wrt=None) -> dict[NodeId, np.ndarray]:
    """Gradients of the scalar node `seed` w.r.t. recorded nodes.

    Returns a map node id -> gradient array (same shape as that node's
    value); absent ids have zero gradient. Gradient does not propagate past
    stop_grad nodes. When `wrt` (an iterable of node ids) is given, only
    paths that can reach one of those nodes are walked; the returned map is
    then only guaranteed to be complete for the `wrt` ids.
    """
    nodes = graph.nodes
    if not 0 <= seed < len(nodes):
        raise GraphError(f"backward: unknown node id {seed}")
    out = nodes[seed].value
    if out.shape not in ((), (1,)):
        raise GraphError(f"backward: seed must be scalar, got shape {out.shape}")

    useful = None
    if wrt is not None:
        useful = bytearray(len(nodes))
        for i in wrt:
            useful[i] = 1
        for j in range(seed + 1):
            if not useful[j]:
                for q in nodes[j].parents:
                    if useful[q]:
                        useful[j] = 1
                        break

    grads: dict[NodeId, np.ndarray] = {seed: np.ones_like(out)}
    for nid in range(seed, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.stop_grad:
            continue
        for pid, contrib in _vjp(node, g, nodes):
            if useful is not None and not useful[pid]:
                continue
            prev = grads.get(pid)
            grads[pid] = contrib if prev is None else prev + contrib
    return grads
