"""Minimal dense float64 tensor with reverse-mode automatic differentiation.

The autodiff graph is implicit: each non-leaf Tensor keeps references to
its parents and a closure that routes the incoming gradient to them.
``backward`` walks the graph once in reverse topological order, so every
node is visited exactly once and cycles are impossible by construction
(tensors only ever point at tensors that already existed).

Also home to two numeric primitives used across the package: the
orthonormal type-II DCT (direct O(n^2) matrix product, plenty at desk
scale) and cosine similarity with a documented degenerate-input rule.
"""

from __future__ import annotations

import math
import warnings
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "dct_ortho",
    "idct_ortho",
    "dct_matrix",
    "cosine_similarity",
    "DegenerateSimilarityWarning",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked by autodiff.

    Data is immutable by convention after construction; the documented
    exceptions are gradient accumulation into ``grad`` and in-place
    parameter updates performed by the optimizer between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        """Constant view of this tensor: same data, no graph participation."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Fills ``grad`` on every requires_grad tensor reachable from this
        one. Iterative topological order (no recursion limits), each node
        visited exactly once.
        """
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        order = topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._node(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._node(-self.data, (self,), backward)

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._node(out_data, (self, other), backward)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._node(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.shape))

        return Tensor._node(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, exponent: float):
        p = float(exponent)
        out_data = self.data ** p

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * p * self.data ** (p - 1.0))

        return Tensor._node(out_data, (self,), backward)

    def __matmul__(self, other):
        other = self._coerce(other)
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                if other.ndim == 1:
                    ga = np.outer(g, other.data) if self.ndim == 2 else g[..., None] * other.data
                else:
                    ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                if self.ndim == 1:
                    gb = np.outer(self.data, g)
                else:
                    gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor._node(out_data, (self, other), backward)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gk, self.shape).copy())

        return Tensor._node(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- shape manipulation ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old_shape))

        return Tensor._node(out_data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        out_data = np.transpose(self.data, axes)

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.transpose(g, inverse))

        return Tensor._node(out_data, (self,), backward)

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice along one axis; backward zero-pads."""
        index = [slice(None)] * self.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        out_data = self.data[index]

        def backward(g):
            if self.requires_grad:
                full = np.zeros(self.shape)
                full[index] = g
                self._accumulate(full)

        return Tensor._node(out_data, (self,), backward)

    def chunk(self, n: int, axis: int = -1) -> list["Tensor"]:
        ax = axis if axis >= 0 else self.ndim + axis
        width = self.shape[ax]
        if width % n != 0:
            raise ValueError(f"cannot split axis of size {width} into {n} chunks")
        step = width // n
        return [self.narrow(ax, i * step, step) for i in range(n)]

    def take_rows(self, indices: np.ndarray):
        """Row gather (embedding lookup); backward scatter-adds."""
        idx = np.asarray(indices)
        out_data = self.data[idx]

        def backward(g):
            if self.requires_grad:
                full = np.zeros(self.shape)
                np.add.at(full, idx, g)
                self._accumulate(full)

        return Tensor._node(out_data, (self,), backward)

    # -- pointwise nonlinearities ------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return Tensor._node(out_data, (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out_data)

        return Tensor._node(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._node(out_data, (self,), backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._node(out_data, (self,), backward)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes of the graph below `root`, parents before children."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an axis; backward splits the gradient."""
    parts = [Tensor._coerce(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis if axis >= 0 else out_data.ndim + axis
    widths = [p.shape[ax] for p in parts]

    def backward(g):
        offset = 0
        for part, width in zip(parts, widths):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(offset, offset + width)
                part._accumulate(g[tuple(index)])
            offset += width

    return Tensor._node(out_data, parts, backward)


# ---------------------------------------------------------------------------
# DCT and similarity primitives
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix; rows are the basis vectors u_i."""
    if n < 1:
        raise ValueError("DCT size must be >= 1")
    k = np.arange(n)[:, None]
    r = np.arange(n)[None, :]
    mat = np.cos(np.pi / n * k * (r + 0.5))
    mat *= np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def dct_ortho(v):
    """Orthonormal DCT-II of a length-n vector. Energy preserving."""
    arr = _as_array(v)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("dct_ortho expects a non-empty 1-d vector")
    out = dct_matrix(arr.size) @ arr
    return Tensor(out) if isinstance(v, Tensor) else out


def idct_ortho(v):
    """Inverse of dct_ortho (the transpose of the orthonormal matrix)."""
    arr = _as_array(v)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("idct_ortho expects a non-empty 1-d vector")
    out = dct_matrix(arr.size).T @ arr
    return Tensor(out) if isinstance(v, Tensor) else out


class DegenerateSimilarityWarning(UserWarning):
    """A zero-norm vector hit cosine_similarity; the result defaults to 0."""


def cosine_similarity(a, b, warn: bool = True) -> float:
    """dot(a,b) / (|a||b|), flattened.

    A zero-norm argument returns 0.0 (with a warning) instead of raising,
    so a degenerate probe feature never aborts a planning run.
    """
    av = _as_array(a).ravel()
    bv = _as_array(b).ravel()
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        if warn:
            warnings.warn("zero-norm input to cosine_similarity; returning 0.0",
                          DegenerateSimilarityWarning, stacklevel=2)
        return 0.0
    value = float(av @ bv) / (na * nb)
    return max(-1.0, min(1.0, value))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is a detached constant,
    which is exact because softmax is shift invariant."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


def gelu_tanh(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the DiT-family default activation)."""
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * ((c * (x + 0.044715 * x * x * x)).tanh() + 1.0)
