"""Define-by-run reverse-mode autodiff over flat float64 numpy storage.

A Graph is a tape: ops append nodes in execution order, which is a valid
topological order, and backward() walks it in exact reverse. The graph is
rebuilt on every forward pass; a tape can be differentiated once.
"""

import numpy as np


class GraphConsumedError(RuntimeError):
    """Raised on a second backward over the same tape."""


class Tensor:
    """Dense f64 tensor: row-major contiguous data plus shape metadata."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: output tensor and a closure that routes
    the output gradient to the inputs."""

    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


_ACTIVE: list["Graph"] = []


class Graph:
    """Tape of operation records in forward (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        assert popped is self
        return False


def active_graph():
    return _ACTIVE[-1] if _ACTIVE else None


def record(out: Tensor, backward_fn) -> None:
    """Append a node for `out` to the active graph, if recording."""
    g = active_graph()
    if g is not None and out.requires_grad:
        g.nodes.append(Node(out, backward_fn))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add gradient g into t.grad. Views are copied so later in-place
    accumulation cannot corrupt another node's buffer."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if not g.flags.owndata or not g.flags.writeable:
            g = g.copy()
        t.grad = g
    else:
        t.grad += g


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Reverse-accumulate gradients of a scalar loss through the tape.

    Every requires_grad tensor reachable from the loss gets .grad filled.
    A second call on the same graph raises GraphConsumedError.
    """
    g = graph if graph is not None else active_graph()
    if g is None:
        raise RuntimeError("backward() requires an active or explicit Graph")
    if g.consumed:
        raise GraphConsumedError("graph already differentiated; re-run forward")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    g.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(g.nodes):
        if node.out.grad is None:
            continue  # not on the loss's ancestor path
        node.backward_fn(node.out.grad)
