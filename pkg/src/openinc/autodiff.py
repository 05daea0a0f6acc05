"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tracked
tensor.  Calling :func:`backward` on a scalar result walks the tape in
reverse and accumulates gradients into every tracked leaf.

The op set is deliberately closed: matmul, add, sub, mul, scale, relu,
transpose, l2_normalize, logsumexp, gather_rows, sum, mean, square, sqrt
and dot.  Losses and layers compose these.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVector, EmptyInput, NonScalarRoot, ShapeMismatch

EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    parents: tuple[int, ...]
    backward: BackwardFn | None  # None for leaves


@dataclass
class Tape:
    """Ordered record of tracked operations.

    Parents always precede children because nodes are appended as the
    forward pass runs.  A tape is single-threaded.
    """

    nodes: list[_Node] = field(default_factory=list)
    gradients: list[np.ndarray | None] = field(default_factory=list)
    _leaves: dict[int, "Tensor"] = field(default_factory=dict)
    _watched: dict[int, "Tensor"] = field(default_factory=dict)

    def watch(self, array: np.ndarray) -> "Tensor":
        """Track ``array`` as a leaf.

        Watching the same array object twice returns the same tensor, so
        a parameter used in several places gets one summed gradient.
        """
        key = id(array)
        hit = self._watched.get(key)
        if hit is not None and hit.data is array:
            return hit
        t = Tensor(array)
        t.tape = self
        t.node_id = self._append(_Node((), None))
        self._leaves[t.node_id] = t
        self._watched[key] = t
        return t

    def grad(self, array_or_tensor) -> np.ndarray:
        """Gradient for a watched array (or tracked tensor) after backward."""
        if isinstance(array_or_tensor, Tensor):
            t = array_or_tensor
        else:
            t = self._watched[id(array_or_tensor)]
        if t.grad is None:
            raise KeyError("no gradient recorded; call backward first")
        return t.grad

    def backward(self, root: "Tensor") -> None:
        backward(self, root)

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        self.gradients.append(None)
        return len(self.nodes) - 1


class Tensor:
    """A float64 array with an optional handle on a tape."""

    __slots__ = ("data", "tape", "node_id", "grad")
    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape: Tape | None = None
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(out_data)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return out
    if len(tapes) > 1:
        raise ValueError("operands are tracked on different tapes")
    tape = next(iter(tapes.values()))
    parents = tuple(-1 if t.tape is None else t.node_id for t in inputs)
    out.tape = tape
    out.node_id = tape._append(_Node(parents, backward_fn))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects a 2-d tensor, got {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g / (2.0 * out),))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim
    return _record(
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise EmptyInput("mean of an empty tensor")
    return scale(sum(a, axis), 1.0 / n)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot expects equal 1-d operands, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def gather_rows(a, index) -> Tensor:
    """Rows ``a[index]``; repeated indices accumulate on the way back."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), back)


def l2_normalize(v, eps: float = EPS) -> Tensor:
    """Unit-normalize along the last axis (a vector, or each row of a matrix)."""
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVector(f"norm <= {eps} cannot be normalized")
    y = v.data / norm

    def back(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _record(y, (v,), back)


def logsumexp(v, mask=None) -> Tensor:
    """Stable log-sum-exp over the last axis.

    ``mask`` (same shape, boolean) restricts the sum to selected entries;
    every reduced slice must keep at least one entry.
    """
    v = as_tensor(v)
    if v.data.ndim == 0 or v.shape[-1] == 0:
        raise EmptyInput("logsumexp over an empty axis")
    x = v.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise ShapeMismatch(f"mask shape {keep.shape} != {x.shape}")
        if not np.all(keep.any(axis=-1)):
            raise EmptyInput("mask removes every entry of a slice")
    shift = np.max(np.where(keep, x, -np.inf), axis=-1, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, x - shift, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = (np.log(total) + shift)[..., 0]
    soft = e / total
    return _record(out, (v,), lambda g: (np.expand_dims(g, -1) * soft,))


def backward(tape: Tape, root: Tensor) -> None:
    """Propagate d(root)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Leaves the root does not depend on receive zeros.
    """
    if root.data.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape:
        raise ValueError("root was not produced on this tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.node_id] = np.ones_like(root.data)
    for nid in range(root.node_id, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent < 0 or pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    tape.gradients = grads
    for nid, leaf in tape._leaves.items():
        g = grads[nid]
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f(x.copy())
        flat[k] = orig - h
        down = f(x.copy())
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad
