"""Define-by-run reverse-mode differentiation on dense float arrays.

A Graph is an append-only tape of nodes; forward execution order is the
topological order. backward() walks the tape once in strict reverse order
and accumulates vector-Jacobian products, materializing gradients only for
nodes on a path to a trainable leaf.
"""

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Node:
    __slots__ = ("idx", "value", "parents", "needs_grad", "name")

    def __init__(self, idx, value, parents, needs_grad, name=None):
        self.idx = idx
        self.value = value
        self.parents = parents  # list of (Node, vjp callable)
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Single-use, single-threaded tape. Rebuilt on every forward pass."""

    def __init__(self, check_finite=True):
        self.nodes = []
        self.trainable_leaves = []
        self.check_finite = check_finite

    def leaf(self, value, trainable=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), value, [], trainable, name)
        self.nodes.append(node)
        if trainable:
            self.trainable_leaves.append(node)
        return node

    def constant(self, value):
        return self.leaf(value, trainable=False)

    def op(self, value, parents, name=None):
        """Register an op result. parents: [(input Node, vjp fn), ...]."""
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite values in op output{f' {name}' if name else ''}")
        needs = any(p.needs_grad for p, _ in parents)
        node = Node(len(self.nodes), value, parents, needs, name)
        self.nodes.append(node)
        return node

    def backward(self, loss):
        """Gradients of a scalar loss for every trainable leaf.

        Returns {leaf name or idx: ndarray}. Frozen leaves never get
        gradient storage; a graph with no trainable leaves returns {}.
        """
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
        assert self.nodes[loss.idx] is loss, "loss node does not belong to this graph"
        if not self.trainable_leaves:
            return {}
        grads = {loss.idx: np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            if node.idx > loss.idx or node.idx not in grads:
                continue
            g = grads.pop(node.idx) if node.parents else grads[node.idx]
            for parent, vjp in node.parents:
                if not parent.needs_grad:
                    continue
                contrib = vjp(g)
                if parent.idx in grads:
                    grads[parent.idx] = grads[parent.idx] + contrib
                else:
                    grads[parent.idx] = contrib
        out = {}
        for leaf in self.trainable_leaves:
            if leaf.idx in grads:
                g = grads[leaf.idx]
            else:
                g = np.zeros_like(leaf.value)
            out[leaf.name if leaf.name is not None else leaf.idx] = g
        return out
