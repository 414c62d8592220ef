"""Tape-free reverse-mode autodiff over dense float64 matrices.

Every op returns a :class:`Node` that remembers its parents and a closure
pushing ``out.grad`` back into them.  Graphs are rebuilt for every forward
pass, so a varying number of detections per view costs nothing special.

Values are plain 2-d ``numpy.float64`` arrays.  Scalars are 1x1.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import itertools

import numpy as np

__all__ = [
    "DimensionError",
    "Node",
    "leaf",
    "const",
    "matmul",
    "add",
    "sub",
    "scale",
    "add_row",
    "transpose",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "interleave_cols",
    "take_rows",
    "relu",
    "layer_norm",
    "sin_cos",
    "sum_all",
    "mean_all",
    "l1_loss",
    "l2_distance",
    "row_distances",
    "pairwise_distances",
    "max_normalize",
    "gather",
    "hinge",
    "backward",
    "gradient_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_counter = itertools.count()


class Node:
    __slots__ = ("value", "_grad", "parents", "_backward", "name", "requires_grad", "seq")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Node"] = (),
        name: str = "",
        requires_grad: bool = True,
    ) -> None:
        if not (type(value) is np.ndarray and value.ndim == 2 and value.dtype == np.float64):
            value = np.asarray(value, dtype=np.float64)
            if value.ndim == 0:
                value = value.reshape(1, 1)
            elif value.ndim == 1:
                value = value.reshape(1, -1)
            elif value.ndim != 2:
                raise DimensionError(f"expected a matrix, got shape {value.shape}")
        self.value = value
        self._grad: np.ndarray | None = None  # allocated (zeroed) on first touch
        self.parents = tuple(parents)
        self._backward: Callable[[], None] | None = None
        self.name = name
        self.seq = next(_counter)  # creation order is a topological order
        # Interior nodes need a gradient only if some input does.
        self.requires_grad = any(p.requires_grad for p in self.parents) if self.parents else requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} shape={self.shape}>"


def leaf(value, name: str = "") -> Node:
    """A parameter or input whose gradient we want to read afterwards."""
    return Node(np.array(value, dtype=np.float64), name=name)


def const(value) -> Node:
    """An input that never receives a gradient."""
    return Node(np.array(value, dtype=np.float64), requires_grad=False)


def _acc(node: Node, g, fresh: bool = False) -> None:
    """``node.grad += g`` without pre-zeroing, skipped for constants.

    ``fresh`` marks ``g`` as a temporary nobody else holds, so it can be adopted
    as the gradient buffer without a copy.
    """
    if not node.requires_grad:
        return
    if node._grad is None:
        if isinstance(g, np.ndarray) and g.shape == node.value.shape:
            node._grad = g if fresh else g.copy()
        elif np.ndim(g) == 0:
            node._grad = np.full(node.value.shape, g, dtype=np.float64)
        else:
            node._grad = np.array(np.broadcast_to(g, node.value.shape), dtype=np.float64)
    else:
        node._grad += g


def _check_same(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = Node(a.value @ b.value, (a, b))

    def _backward() -> None:
        if a.requires_grad:
            _acc(a, out.grad @ b.value.T, fresh=True)
        if b.requires_grad:
            _acc(b, a.value.T @ out.grad, fresh=True)

    out._backward = _backward
    return out


def add(a: Node, b: Node) -> Node:
    _check_same(a, b, "add")
    out = Node(a.value + b.value, (a, b))

    def _backward() -> None:
        _acc(a, out.grad)
        _acc(b, out.grad)

    out._backward = _backward
    return out


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    out = Node(a.value - b.value, (a, b))

    def _backward() -> None:
        _acc(a, out.grad)
        _acc(b, -out.grad, fresh=True)

    out._backward = _backward
    return out


def scale(a: Node, factor: float) -> Node:
    out = Node(a.value * factor, (a,))

    def _backward() -> None:
        _acc(a, out.grad * factor, fresh=True)

    out._backward = _backward
    return out


def add_row(a: Node, row: Node) -> Node:
    """Broadcast-add a 1 x k row to every row of an n x k matrix."""
    if row.shape[0] != 1 or row.shape[1] != a.shape[1]:
        raise DimensionError(f"add_row: {a.shape} + {row.shape}")
    out = Node(a.value + row.value, (a, row))

    def _backward() -> None:
        _acc(a, out.grad)
        _acc(row, out.grad.sum(axis=0, keepdims=True), fresh=True)

    out._backward = _backward
    return out


def transpose(a: Node) -> Node:
    out = Node(a.value.T, (a,))

    def _backward() -> None:
        _acc(a, out.grad.T)

    out._backward = _backward
    return out


def concat_cols(*nodes: Node) -> Node:
    if not nodes:
        raise DimensionError("concat_cols: nothing to concatenate")
    rows = nodes[0].shape[0]
    for n in nodes:
        if n.shape[0] != rows:
            raise DimensionError(
                f"concat_cols: row counts {[m.shape[0] for m in nodes]} differ"
            )
    out = Node(np.concatenate([n.value for n in nodes], axis=1), nodes)
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])

    def _backward() -> None:
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _acc(n, out.grad[:, lo:hi])

    out._backward = _backward
    return out


def concat_rows(*nodes: Node) -> Node:
    if not nodes:
        raise DimensionError("concat_rows: nothing to concatenate")
    cols = nodes[0].shape[1]
    for n in nodes:
        if n.shape[1] != cols:
            raise DimensionError(
                f"concat_rows: column counts {[m.shape[1] for m in nodes]} differ"
            )
    out = Node(np.concatenate([n.value for n in nodes], axis=0), nodes)
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def _backward() -> None:
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _acc(n, out.grad[lo:hi])

    out._backward = _backward
    return out


def slice_cols(a: Node, lo: int, hi: int) -> Node:
    out = Node(a.value[:, lo:hi], (a,))

    def _backward() -> None:
        a.grad[:, lo:hi] += out.grad

    out._backward = _backward
    return out


def slice_rows(a: Node, lo: int, hi: int) -> Node:
    out = Node(a.value[lo:hi], (a,))

    def _backward() -> None:
        a.grad[lo:hi] += out.grad

    out._backward = _backward
    return out


def interleave_cols(a: Node, b: Node) -> Node:
    """[a0, b0, a1, b1, ...] column-wise; a and b must share a shape."""
    _check_same(a, b, "interleave_cols")
    n, k = a.shape
    val = np.empty((n, 2 * k))
    val[:, 0::2] = a.value
    val[:, 1::2] = b.value
    out = Node(val, (a, b))

    def _backward() -> None:
        _acc(a, out.grad[:, 0::2])
        _acc(b, out.grad[:, 1::2])

    out._backward = _backward
    return out


def take_rows(a: Node, index) -> Node:
    """Gather rows by integer index; repeated indices accumulate on backward."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    out = Node(a.value[index], (a,))

    def _backward() -> None:
        np.add.at(a.grad, index, out.grad)

    out._backward = _backward
    return out


def relu(a: Node) -> Node:
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,))

    def _backward() -> None:
        _acc(a, out.grad * mask, fresh=True)

    out._backward = _backward
    return out


def layer_norm(a: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Per-row normalisation to zero mean / unit variance, then gain * x + bias."""
    k = a.shape[1]
    if gain.shape != (1, k) or bias.shape != (1, k):
        raise DimensionError(
            f"layer_norm: input {a.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    centred = a.value - a.value.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=1, keepdims=True) + eps)
    normed = centred * inv_std
    out = Node(normed * gain.value + bias.value, (a, gain, bias))

    def _backward() -> None:
        g = out.grad
        _acc(gain, (g * normed).sum(axis=0, keepdims=True), fresh=True)
        _acc(bias, g.sum(axis=0, keepdims=True), fresh=True)
        gn = g * gain.value
        _acc(a, inv_std * (
            gn
            - gn.mean(axis=1, keepdims=True)
            - normed * (gn * normed).mean(axis=1, keepdims=True)
        ), fresh=True)

    out._backward = _backward
    return out


def sin_cos(a: Node) -> tuple[Node, Node]:
    s, c = np.sin(a.value), np.cos(a.value)
    sin_node = Node(s, (a,))
    cos_node = Node(c, (a,))

    def _back_sin() -> None:
        _acc(a, sin_node.grad * c, fresh=True)

    def _back_cos() -> None:
        _acc(a, -(cos_node.grad * s), fresh=True)

    sin_node._backward = _back_sin
    cos_node._backward = _back_cos
    return sin_node, cos_node


def sum_all(a: Node) -> Node:
    out = Node(a.value.sum(), (a,))

    def _backward() -> None:
        _acc(a, out.grad[0, 0])

    out._backward = _backward
    return out


def mean_all(a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise DimensionError("mean_all: empty input")
    out = Node(a.value.mean(), (a,))

    def _backward() -> None:
        _acc(a, out.grad[0, 0] / n)

    out._backward = _backward
    return out


def l1_loss(a: Node, target) -> Node:
    """Mean absolute error against a constant target (subgradient 0 at equality)."""
    target = np.asarray(target, dtype=np.float64).reshape(a.shape)
    diff = a.value - target
    out = Node(np.abs(diff).mean(), (a,))
    sign = np.sign(diff) / diff.size

    def _backward() -> None:
        _acc(a, out.grad[0, 0] * sign)

    out._backward = _backward
    return out


def l2_distance(a: Node, b: Node) -> Node:
    """Euclidean distance between two equally-shaped operands (as flat vectors)."""
    _check_same(a, b, "l2_distance")
    diff = a.value - b.value
    dist = float(np.sqrt((diff**2).sum()))
    out = Node(dist, (a, b))

    def _backward() -> None:
        if dist == 0.0:
            return
        g = out.grad[0, 0] * diff / dist
        _acc(a, g)
        _acc(b, -g, fresh=True)

    out._backward = _backward
    return out


def row_distances(a: Node, b: Node) -> Node:
    """n x 1 column of ||a_k - b_k|| for paired rows."""
    _check_same(a, b, "row_distances")
    diff = a.value - b.value
    dist = np.sqrt((diff**2).sum(axis=1, keepdims=True))
    out = Node(dist, (a, b))

    def _backward() -> None:
        safe = np.where(dist > 0, dist, 1.0)
        g = np.where(dist > 0, out.grad / safe, 0.0) * diff
        _acc(a, g)
        _acc(b, -g, fresh=True)

    out._backward = _backward
    return out


def pairwise_distances(a: Node, b: Node) -> Node:
    """n x m matrix of Euclidean distances between rows of a and rows of b."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distances: {a.shape} vs {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    out = Node(dist, (a, b))

    def _backward() -> None:
        safe = np.where(dist > 0, dist, 1.0)
        w = np.where(dist > 0, out.grad / safe, 0.0)
        g = w[:, :, None] * diff
        _acc(a, g.sum(axis=1), fresh=True)
        _acc(b, -g.sum(axis=0), fresh=True)

    out._backward = _backward
    return out


def max_normalize(a: Node) -> Node:
    """Divide by the largest entry; an all-zero (max <= 0) matrix passes through."""
    top = float(a.value.max()) if a.value.size else 0.0
    if top <= 0.0:
        out = Node(a.value.copy(), (a,))

        def _backward_id() -> None:
            _acc(a, out.grad)

        out._backward = _backward_id
        return out
    flat = int(np.argmax(a.value))
    r, c = divmod(flat, a.shape[1])
    out = Node(a.value / top, (a,))

    def _backward() -> None:
        g = out.grad
        _acc(a, g / top, fresh=True)
        a.grad[r, c] -= float((g * a.value).sum()) / (top * top)

    out._backward = _backward
    return out


def gather(a: Node, rows, cols) -> Node:
    """1 x k row of selected entries a[rows[t], cols[t]]."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Node(a.value[rows, cols].reshape(1, -1), (a,))

    def _backward() -> None:
        np.add.at(a.grad, (rows, cols), out.grad[0])

    out._backward = _backward
    return out


def hinge(x: Node, margin: float) -> Node:
    """max(0, x + margin) for a scalar x; subgradient 0 at the kink."""
    if x.value.size != 1:
        raise DimensionError(f"hinge expects a scalar, got {x.shape}")
    if margin < 0:
        raise ValueError("hinge margin must be non-negative")
    z = x.item() + margin
    active = z > 0
    out = Node(max(0.0, z), (x,))

    def _backward() -> None:
        if active:
            _acc(x, out.grad)

    out._backward = _backward
    return out


def _topological(root: Node) -> list[Node]:
    """Nodes reachable from ``root`` through gradient-carrying edges, inputs first."""
    seen = {id(root): root}
    stack = [root]
    while stack:
        for p in stack.pop().parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n.seq)


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every reachable node's ``grad``.

    Constants and subgraphs built only from constants are skipped.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    root.grad += 1.0
    for node in reversed(_topological(root)):
        if node._backward is not None and node._grad is not None:
            node._backward()


def gradient_check(
    build: Callable[[Sequence[Node]], Node],
    params: Iterable[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> dict:
    """Compare analytic gradients with central differences.

    ``build`` receives fresh leaf nodes (one per array in ``params``) and must
    return a scalar node.  The relative error per tensor is
    ``max|g_a - g_n| / max(max|g_a|, max|g_n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    nodes = [leaf(a) for a in arrays]
    root = build(nodes)
    backward(root)
    analytic = [n.grad.copy() for n in nodes]

    def evaluate() -> float:
        return build([leaf(a) for a in arrays]).item()

    errors = []
    numeric_all = []
    for arr, g_a in zip(arrays, analytic):
        view = arr.reshape(-1)
        g_n = np.zeros(view.size)
        for k in range(view.size):
            orig = view[k]
            view[k] = orig + step
            hi = evaluate()
            view[k] = orig - step
            lo = evaluate()
            view[k] = orig
            g_n[k] = (hi - lo) / (2 * step)
        g_n = g_n.reshape(arr.shape)
        numeric_all.append(g_n)
        denom = max(np.abs(g_a).max(initial=0.0), np.abs(g_n).max(initial=0.0), 1e-8)
        errors.append(float(np.abs(g_a - g_n).max(initial=0.0) / denom))
    return {
        "max_rel_error": errors,
        "analytic": analytic,
        "numeric": numeric_all,
        "passed": all(e < tol for e in errors),
    }
