"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every operation records its inputs and a closure that maps the output
gradient to input gradients. ``Tensor.backward`` walks the graph in reverse
topological order. Broadcasting is supported for elementwise operations.
"""

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    # -- graph traversal ---------------------------------------------------

    def backward(self, seed=None):
        if seed is None:
            seed = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.data.shape, other.data.shape
        return Tensor(self.data + other.data, parents=(self, other),
                      backward=lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, parents=(self,), backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor(x * y, parents=(self, other), backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor(x / y, parents=(self, other), backward=back)

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor(x @ y, parents=(self, other),
                      backward=lambda g: (g @ y.T, x.T @ g))

    # -- unary functions ---------------------------------------------------

    def relu(self):
        mask = self.data > 0
        return Tensor(np.where(mask, self.data, 0.0), parents=(self,),
                      backward=lambda g: (g * mask,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * (1.0 - out * out),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * 0.5 / out,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor(np.log(x), parents=(self,), backward=lambda g: (g / x,))

    def log_softmax(self, axis=-1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        soft = np.exp(out)

        def back(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return Tensor(out, parents=(self,), backward=back)

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,),
                      backward=back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(self.data.reshape(*shape), parents=(self,),
                      backward=lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Tensor(self.data.T, parents=(self,), backward=lambda g: (g.T,))

    def __getitem__(self, index):
        shape = self.data.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor(self.data[index], parents=(self,), backward=back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors), backward=back)


def pairwise_sq_dist(a, b):
    """Squared Euclidean distances between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    n, d = a.shape
    m = b.shape[0]
    diff = a.reshape(n, 1, d) - b.reshape(1, m, d)
    return (diff * diff).sum(axis=2)
