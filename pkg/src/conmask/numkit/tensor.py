"""Dense float64 tensors with reverse-mode gradients.

A Tensor is simultaneously the value container and the computation-graph
node: it keeps its parents and a backward closure, so calling
``backward()`` on a scalar result fills ``grad`` on every reachable node
that requires gradients. Everything is float64; there is no broadcasting
beyond what the individual ops define.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from conmask.errors import ShapeError


class Tensor:
    """Value + gradient + backward rule. ``data`` is always float64."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.data.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.ndim != 0:
            raise ShapeError(f"backward requires a scalar output, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar; the module-level functions hold the real rules.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name: str | None = None) -> Tensor:
    """A leaf that never receives gradients."""
    return Tensor(x, requires_grad=False, name=name)


def parameter(x, name: str) -> Tensor:
    """A named trainable leaf."""
    return Tensor(x, requires_grad=True, name=name)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; graphs can be a few thousand nodes deep across a batch.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op,
                  parents=tuple(parents), backward=backward if needs else None)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, "mul", (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _node(a.data.T, "transpose", (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements -> scalar."""
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _node(a.data.sum(), "sum", (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    """Mean of all elements -> scalar."""
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _node(a.data.mean(), "mean", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return _node(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _node(np.log(a.data), "log", (a,), bwd)


def stack_scalars(items: Iterable[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor."""
    items = list(items)
    if not items:
        raise ShapeError("stack_scalars needs at least one element")
    for it in items:
        if it.data.ndim != 0:
            raise ShapeError(f"stack_scalars expects scalars, got shape {it.data.shape}")

    def bwd(g):
        for i, it in enumerate(items):
            if it.requires_grad:
                it.accumulate_grad(np.asarray(g[i]))

    return _node(np.array([it.data for it in items]), "stack", tuple(items), bwd)


def pad_rows(a: Tensor, total_rows: int) -> Tensor:
    """Append zero rows so the result has ``total_rows`` rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"pad_rows expects a matrix, got shape {a.data.shape}")
    rows = a.data.shape[0]
    if total_rows < rows:
        raise ShapeError(f"pad_rows target {total_rows} < current rows {rows}")
    if total_rows == rows:
        return a
    out = np.zeros((total_rows, a.data.shape[1]))
    out[:rows] = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[:rows])

    return _node(out, "pad_rows", (a,), bwd)
