"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity is a ``Node`` wrapping a float64 ndarray.
Primitive operations build new nodes that remember their parents together
with a vector-Jacobian closure; ``backward`` replays the recorded graph in
reverse creation order and accumulates cotangents.

Conventions used throughout the package:

* activations are 2-D ``(batch, dim)`` arrays (a single vector is batch 1),
* weight matrices are ``(out_dim, in_dim)``, biases are 1-D ``(out_dim,)``,
* scalar results (losses) are 0-d arrays,
* time steps and other non-trainable factors enter as plain ndarrays, never
  as nodes, so no gradient is ever produced for them.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import expit

_COUNTER = itertools.count()


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "parents", "vjp", "idx")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.idx = next(_COUNTER)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, idx={self.idx})"


def leaf(value) -> Node:
    """Wrap an array as an input node (parameter or constant)."""
    return Node(value)


def _check_same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a: Node, c) -> Node:
    """``c * a`` for a constant scalar or broadcastable array ``c``."""
    c = np.asarray(c, dtype=np.float64)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    return Node(a.value + c, (a,), lambda g: (g,))


def add_scaled(a: Node, b: Node, s) -> Node:
    """``a + s * b`` with a constant factor ``s`` (scalar or (batch, 1))."""
    _check_same_shape(a, b, "add_scaled")
    s = np.asarray(s, dtype=np.float64)
    return Node(a.value + s * b.value, (a, b), lambda g: (g, g * s))


def matmul_t(x: Node, w: Node) -> Node:
    """``x @ w.T`` for activations (batch, in) and weights (out, in)."""
    return Node(x.value @ w.value.T, (x, w), lambda g: (g @ w.value, g.T @ x.value))


def affine(x: Node, w: Node, b: Node) -> Node:
    """``x @ w.T + b``: one dense layer without activation."""
    y = x.value @ w.value.T + b.value
    return Node(y, (x, w, b), lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))


def affine2(x: Node, wx: Node, h: Node, wh: Node, b: Node) -> Node:
    """``x @ wx.T + h @ wh.T + b``: gate pre-activation with two inputs."""
    y = x.value @ wx.value.T + h.value @ wh.value.T + b.value
    return Node(
        y,
        (x, wx, h, wh, b),
        lambda g: (g @ wx.value, g.T @ x.value, g @ wh.value, g.T @ h.value, g.sum(axis=0)),
    )


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return Node(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Node) -> Node:
    y = expit(a.value)
    return Node(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return Node(y, (a,), lambda g: (g * y,))


def identity(a: Node) -> Node:
    return a


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return Node(a.value.sum(), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Node) -> Node:
    shape = a.value.shape
    n = a.value.size
    return Node(a.value.mean(), (a,), lambda g: (np.full(shape, float(g) / n),))


def split_cols(a: Node, j0: int, j1: int) -> Node:
    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, j0:j1] = g
        return (full,)

    return Node(a.value[:, j0:j1], (a,), vjp)


def concat_cols(a: Node, b: Node) -> Node:
    na = a.value.shape[1]
    return Node(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (g[:, :na], g[:, na:]),
    )


ACTIVATION_NODES = {"tanh": tanh, "sigmoid": sigmoid, "identity": identity}


def backward(seeds) -> dict:
    """Run the reverse sweep from ``seeds``: a list of (node, cotangent) pairs.

    Returns a dict mapping every reachable node to its accumulated cotangent,
    so intermediate Jacobian rows can be read off as well as leaf gradients.
    """
    grads: dict[Node, np.ndarray] = {}
    for node, g in seeds:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != node.value.shape:
            raise ValueError(
                f"cotangent shape {g.shape} does not match node shape {node.value.shape}"
            )
        prev = grads.get(node)
        grads[node] = g.copy() if prev is None else prev + g

    seen = set()
    reachable = []
    stack = [node for node, _ in seeds]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        reachable.append(node)
        stack.extend(node.parents)

    reachable.sort(key=lambda n: n.idx, reverse=True)
    for node in reachable:
        g = grads.get(node)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    return grads


class ParamSet:
    """Named, ordered collection of trainable arrays for one sub-network.

    Entries are autodiff leaf nodes; insertion order is the declared order
    used for checkpoints and gradient flattening.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self._nodes: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._nodes:
            raise ValueError(f"duplicate parameter name {name!r} in {self.name!r}")
        node = leaf(np.array(value, dtype=np.float64))
        self._nodes[name] = node
        return node

    def node(self, name: str) -> Node:
        return self._nodes[name]

    def array(self, name: str) -> np.ndarray:
        return self._nodes[name].value

    def names(self):
        return list(self._nodes)

    def items(self):
        return list(self._nodes.items())

    def n_params(self) -> int:
        return sum(n.value.size for n in self._nodes.values())

    def __contains__(self, name):
        return name in self._nodes

    def __len__(self):
        return len(self._nodes)
