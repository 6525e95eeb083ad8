"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a float64 ndarray and records the operations that produced
it.  Calling ``backward()`` on a scalar tensor walks the recorded graph in
reverse topological order and accumulates d(root)/d(leaf) into ``grad`` of
every leaf that has ``requires_grad`` set.  Gradients always accumulate
(never overwrite), so a leaf used twice receives the sum of both paths.

The graph is implicit: each non-leaf tensor keeps its parents and a closure
that pushes its output gradient to them.  A fresh graph is built on every
forward pass; after backward the closures are released and calling backward
again on the same root raises.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad=False, _prev=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = tuple(_prev)
        self._backward = None
        self._op = _op
        self._freed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A constant view of this tensor, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        if self._freed:
            raise RuntimeError("backward called twice on the same graph; re-run the forward pass")

        # Iterative topological sort: deep graphs (long compositing chains)
        # would overflow the recursion limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            node._freed = True
            node._backward = None
            if node._prev:
                node.grad = None  # intermediates drop their grads; leaves keep theirs

    # -- helpers ------------------------------------------------------------

    @staticmethod
    def _wrap(other):
        return other if isinstance(other, Tensor) else Tensor(other)

    def _make(self, data, prev, op, backward):
        req = any(p.requires_grad for p in prev)
        out = Tensor(data, requires_grad=req, _prev=prev if req else (), _op=op)
        if req:
            out._backward = backward(out)
        return out

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._wrap(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError("add", self.shape, other.shape) from None

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad, other.shape))
            return _backward

        return self._make(data, (self, other), "add", bw)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._wrap(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError("mul", self.shape, other.shape) from None

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.shape))
            return _backward

        return self._make(data, (self, other), "mul", bw)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __truediv__(self, other):
        other = self._wrap(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._wrap(other) * self ** -1.0

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("pow supports scalar exponents only")
        data = self.data ** p

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * p * self.data ** (p - 1))
            return _backward

        return self._make(data, (self,), "pow", bw)

    def __matmul__(self, other):
        other = self._wrap(other)
        try:
            data = np.matmul(self.data, other.data)
        except ValueError:
            raise ShapeError("matmul", self.shape, other.shape) from None

        def bw(out):
            def _backward():
                # Promote 1-D operands to matrices, matching numpy matmul
                # semantics, then use the standard matrix rules.
                a = self.data[None, :] if self.ndim == 1 else self.data
                b = other.data[:, None] if other.ndim == 1 else other.data
                g = out.grad
                if self.ndim == 1:
                    g = np.expand_dims(g, -2)
                if other.ndim == 1:
                    g = np.expand_dims(g, -1)
                if self.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b, -1, -2))
                    ga = _unbroadcast(ga, a.shape)
                    if self.ndim == 1:
                        ga = ga[..., 0, :]
                    self._accumulate(ga)
                if other.requires_grad:
                    gb = np.matmul(np.swapaxes(a, -1, -2), g)
                    gb = _unbroadcast(gb, b.shape)
                    if other.ndim == 1:
                        gb = gb[..., 0]
                    other._accumulate(gb)
            return _backward

        return self._make(data, (self, other), "matmul", bw)

    # -- pointwise nonlinearities -------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * data)
            return _backward

        return self._make(data, (self,), "exp", bw)

    def log(self):
        data = np.log(self.data)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad / self.data)
            return _backward

        return self._make(data, (self,), "log", bw)

    def sqrt(self):
        data = np.sqrt(self.data)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * 0.5 / data)
            return _backward

        return self._make(data, (self,), "sqrt", bw)

    def abs(self):
        data = np.abs(self.data)
        sign = np.sign(self.data)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * sign)
            return _backward

        return self._make(data, (self,), "abs", bw)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * data * (1.0 - data))
            return _backward

        return self._make(data, (self,), "sigmoid", bw)

    def tanh(self):
        data = np.tanh(self.data)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * (1.0 - data * data))
            return _backward

        return self._make(data, (self,), "tanh", bw)

    def gelu(self):
        # tanh approximation; the backward differentiates the same approximation
        # so finite-difference checks stay tight.
        c = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        data = 0.5 * x * (1.0 + t)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
                    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                    self._accumulate(out.grad * d)
            return _backward

        return self._make(data, (self,), "gelu", bw)

    def relu(self):
        mask = self.data > 0

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad * mask)
            return _backward

        return self._make(self.data * mask, (self,), "relu", bw)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    g = out.grad
                    if axis is not None and not keepdims:
                        g = np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(g, self.shape).copy())
            return _backward

        return self._make(data, (self,), "sum", bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def _extremum(self, axis, kind):
        argfn = np.argmin if kind == "min" else np.argmax
        if axis is None:
            flat_idx = argfn(self.data)  # first occurrence: deterministic tie-break
            data = self.data.reshape(-1)[flat_idx]

            def bw(out):
                def _backward():
                    if self.requires_grad:
                        g = np.zeros(self.data.size)
                        g[flat_idx] = out.grad
                        self._accumulate(g.reshape(self.shape))
                return _backward

            return self._make(data, (self,), kind, bw)

        idx = argfn(self.data, axis=axis)
        data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    g = np.zeros_like(self.data)
                    np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
                    self._accumulate(g)
            return _backward

        return self._make(data, (self,), kind, bw)

    def min(self, axis=None):
        return self._extremum(axis, "min")

    def max(self, axis=None):
        return self._extremum(axis, "max")

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad.reshape(self.shape))
            return _backward

        return self._make(data, (self,), "reshape", bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        data = self.data.transpose(axes)
        inv = np.argsort(axes)

        def bw(out):
            def _backward():
                if self.requires_grad:
                    self._accumulate(out.grad.transpose(inv))
            return _backward

        return self._make(data, (self,), "transpose", bw)

    def __getitem__(self, key):
        data = self.data[key]

        def bw(out):
            def _backward():
                if self.requires_grad:
                    g = np.zeros_like(self.data)
                    np.add.at(g, key, out.grad)
                    self._accumulate(g)
            return _backward

        return self._make(data, (self,), "slice", bw)


# -- module-level op functions ----------------------------------------------


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def maximum(a, b):
    a = Tensor._wrap(a)
    b = Tensor._wrap(b)
    try:
        data = np.maximum(a.data, b.data)
    except ValueError:
        raise ShapeError("maximum", a.shape, b.shape) from None
    take_a = a.data >= b.data  # ties route to the first operand

    def bw(out):
        def _backward():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * take_a, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape))
        return _backward

    return a._make(data, (a, b), "maximum", bw)


def minimum(a, b):
    a = Tensor._wrap(a)
    b = Tensor._wrap(b)
    try:
        data = np.minimum(a.data, b.data)
    except ValueError:
        raise ShapeError("minimum", a.shape, b.shape) from None
    take_a = a.data <= b.data

    def bw(out):
        def _backward():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * take_a, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * ~take_a, b.shape))
        return _backward

    return a._make(data, (a, b), "minimum", bw)


def softmax(t, axis=-1):
    # The stabilizing shift is a constant; softmax is shift-invariant so the
    # gradient is unaffected.
    shift = Tensor(np.max(t.data, axis=axis, keepdims=True))
    e = (t - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(t, gamma=None, beta=None, axis=-1, eps=1e-5):
    """Normalize along `axis`; constant inputs map to zero (variance -> eps)."""
    mu = t.mean(axis=axis, keepdims=True)
    centered = t - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    out = centered / (var + eps).sqrt()
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def concatenate(tensors, axis=0):
    tensors = [Tensor._wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    a = tensors[0]

    def bw(out):
        def _backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(out.grad[tuple(sl)])
        return _backward

    return a._make(data, tuple(tensors), "concatenate", bw)


def stack(tensors, axis=0):
    tensors = [Tensor._wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    a = tensors[0]

    def bw(out):
        def _backward():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(out.grad, i, axis=axis))
        return _backward

    return a._make(data, tuple(tensors), "stack", bw)


def gather(t, indices, axis=0):
    """Select rows/slices by integer index along `axis`; backward scatter-adds."""
    t = Tensor._wrap(t)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ValueError("gather requires 1-D indices")
    data = np.take(t.data, indices, axis=axis)

    def bw(out):
        def _backward():
            if t.requires_grad:
                g = np.zeros_like(t.data)
                np.add.at(np.moveaxis(g, axis, 0), indices, np.moveaxis(out.grad, axis, 0))
                t._accumulate(g)
        return _backward

    return t._make(data, (t,), "gather", bw)


def where_const(mask, t):
    """Multiply by a constant boolean mask (mask is not differentiated)."""
    return t * Tensor(np.asarray(mask, dtype=np.float64))
