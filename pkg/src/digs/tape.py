"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray and records, per operation, a
closure that propagates adjoints to its parents.  :class:`GradientTape`
replays those closures in reverse topological order, touching every node
exactly once.  Every backward rule here is hand-written and covered by
finite-difference tests; keep new ops small and composable.

All arithmetic is float64.  Broadcasting in binary ops is supported and
adjoints are summed back down to the parent's shape.
"""

from __future__ import annotations

import numpy as np

from .errors import TapeStateError

__all__ = [
    "Tensor",
    "GradientTape",
    "tensor",
    "parameter",
    "stack",
    "concat",
    "matmul",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A node in the recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        out = Tensor(self.data - other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        out._backward = backward
        return out

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))

        def backward(g):
            self._accumulate(-g)

        out._backward = backward
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent, parents=(self,))

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        out._backward = backward
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise functions ---------------------------------------------

    def exp(self):
        value = np.exp(self.data)
        out = Tensor(value, parents=(self,))

        def backward(g):
            self._accumulate(g * value)

        out._backward = backward
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))

        def backward(g):
            self._accumulate(g / self.data)

        out._backward = backward
        return out

    def sqrt(self):
        value = np.sqrt(self.data)
        out = Tensor(value, parents=(self,))

        def backward(g):
            self._accumulate(g * 0.5 / value)

        out._backward = backward
        return out

    def tanh(self):
        value = np.tanh(self.data)
        out = Tensor(value, parents=(self,))

        def backward(g):
            self._accumulate(g * (1.0 - value * value))

        out._backward = backward
        return out

    def sigmoid(self):
        value = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(value, parents=(self,))

        def backward(g):
            self._accumulate(g * value * (1.0 - value))

        out._backward = backward
        return out

    def sin(self):
        out = Tensor(np.sin(self.data), parents=(self,))

        def backward(g):
            self._accumulate(g * np.cos(self.data))

        out._backward = backward
        return out

    def cos(self):
        out = Tensor(np.cos(self.data), parents=(self,))

        def backward(g):
            self._accumulate(-g * np.sin(self.data))

        out._backward = backward
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), parents=(self,))

        def backward(g):
            self._accumulate(g * np.sign(self.data))

        out._backward = backward
        return out

    def square(self):
        out = Tensor(self.data * self.data, parents=(self,))

        def backward(g):
            self._accumulate(g * 2.0 * self.data)

        out._backward = backward
        return out

    def clip(self, lo=None, hi=None):
        """Clamp into [lo, hi]; gradient passes only where not clipped.

        Bounds are plain arrays/scalars, never differentiated.
        """
        lo_a = None if lo is None else _as_array(lo)
        hi_a = None if hi is None else _as_array(hi)
        value = np.clip(self.data, lo_a, hi_a)
        mask = np.ones_like(self.data, dtype=bool)
        if lo_a is not None:
            mask &= self.data >= lo_a
        if hi_a is not None:
            mask &= self.data <= hi_a
        out = Tensor(value, parents=(self,))

        def backward(g):
            self._accumulate(g * mask)

        out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        shape = self.data.shape

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape).copy())

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def min_axis1(self):
        """Row-wise minimum of a 2D tensor; ties send gradient to the lowest index."""
        if self.data.ndim != 2:
            raise ValueError("min_axis1 expects a 2D tensor")
        idx = np.argmin(self.data, axis=1)
        rows = np.arange(self.data.shape[0])
        out = Tensor(self.data[rows, idx], parents=(self,))

        def backward(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, (rows, idx), g)
            self._accumulate(buf)

        out._backward = backward
        return out

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))
        orig = self.data.shape

        def backward(g):
            self._accumulate(g.reshape(orig))

        out._backward = backward
        return out

    def swapaxes(self, a, b):
        out = Tensor(self.data.swapaxes(a, b), parents=(self,))

        def backward(g):
            self._accumulate(g.swapaxes(a, b))

        out._backward = backward
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))
        shape = self.data.shape

        def backward(g):
            buf = np.zeros(shape, dtype=np.float64)
            np.add.at(buf, key, g)
            self._accumulate(buf)

        out._backward = backward
        return out

    def take_rows(self, indices):
        """Gather rows along axis 0; backward scatter-adds into the source."""
        indices = np.asarray(indices)
        return self[indices]

    def norm_axis(self, axis=-1, keepdims=False):
        return self.square().sum(axis=axis, keepdims=keepdims).sqrt()


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, name="") -> Tensor:
    """A constant (non-differentiable) node."""
    return Tensor(data, name=name)


def parameter(data, name="") -> Tensor:
    """A leaf tensor that accumulates gradients."""
    t = Tensor(data, requires_grad=True, name=name)
    t.grad = np.zeros_like(t.data)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2D and leading-batch operands."""
    a = _wrap(a)
    b = _wrap(b)
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


def stack(tensors, axis=0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis), parents=tuple(ts))

    def backward(g):
        pieces = np.split(g, len(ts), axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accumulate(piece.reshape(t.data.shape))

    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), parents=tuple(ts))
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def backward(g):
        pieces = np.split(g, sizes, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    out._backward = backward
    return out


class GradientTape:
    """Executes the reverse pass over a recorded forward graph.

    The graph itself lives on the tensors; the tape owns traversal and the
    guarantee that each node's backward closure fires exactly once per call.
    """

    def __init__(self):
        self._last_output = None

    def backward(self, output: Tensor, seed=None):
        """Propagate `seed` (default: ones) from `output` to all leaves."""
        if output is None:
            raise TapeStateError("backward called without a recorded forward pass")
        if not isinstance(output, Tensor):
            raise TypeError("backward expects a Tensor")
        if not output.requires_grad:
            raise TapeStateError("output does not depend on any parameter")
        seed = np.ones_like(output.data) if seed is None else _as_array(seed)
        if seed.shape != output.data.shape:
            raise ValueError("seed gradient shape mismatch")

        # Reverse topological order: every consumer fires before its inputs,
        # so a node's adjoint is complete when its closure runs.  Interior
        # adjoints are reset so repeated backward calls stay correct; leaf
        # .grad accumulates across calls (trainer zeroes between steps).
        order = self._topo_order(output)
        for node in order:
            if node._backward is not None:
                node.grad = None
        output._accumulate(seed)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._last_output = output

    @staticmethod
    def _topo_order(root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        order.reverse()
        return order
