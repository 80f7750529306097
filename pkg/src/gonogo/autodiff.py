"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a `Tensor` wraps a numpy float32 array and
remembers how it was produced, `backward()` walks the graph in reverse
topological order and accumulates gradients additively into every tensor that
requires them.  Ops never raise on NaN/Inf by themselves; callers that need
the guarantee run `check_finite` (training loops do this on every loss).

Convolution-style ops live in `gonogo.nn`; this module only holds the graph
machinery and elementwise / reduction / matmul primitives.
"""

import weakref

import numpy as np


class MemoryTracker:
    """High-water-mark accounting of tensor buffer bytes allocated by the engine."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, nbytes):
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def sub(self, nbytes):
        self.current -= nbytes

    def reset_peak(self):
        self.peak = self.current


memory = MemoryTracker()


class GradientError(ValueError):
    """Raised for invalid backward calls (non-scalar loss) or NaN gradients."""


class Tensor:
    """N-d float32 array that participates in reverse-mode autodiff.

    `requires_grad` marks leaves whose gradient the caller wants; op outputs
    require grad whenever any input does.  `grad` is lazily allocated and
    accumulated additively, so a tensor consumed twice receives the sum of
    both contributions.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward",
                 "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        memory.add(self.data.nbytes)
        weakref.finalize(self, memory.sub, self.data.nbytes)

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A view of the same data cut out of the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def backward(self):
        """Populate `grad` on every reachable tensor; `self` must be scalar."""
        if self.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def make_op(data, inputs, backward_fn):
    """Create an op output; `backward_fn(grad)` routes gradient to inputs.

    The graph edge and closure are only kept when some input requires grad,
    so pure inference allocates no graph.
    """
    out = Tensor(data)
    parents = tuple(t for t in inputs if isinstance(t, Tensor) and t.requires_grad)
    if parents:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def check_finite(t, what="tensor"):
    """Raise GradientError if `t` holds NaN or Inf.  Returns `t` unchanged."""
    if not np.all(np.isfinite(t.data)):
        raise GradientError(f"non-finite values in {what}")
    return t


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return make_op(a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return make_op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_op(a.data / b.data, (a, b), bw)


def square(a):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g * (2.0 * a.data))

    return make_op(a.data * a.data, (a,), bw)


def absolute(a):
    # subgradient 0 at exactly zero
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g * np.sign(a.data))

    return make_op(np.abs(a.data), (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * (0.5 / out_data))

    return make_op(out_data, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return make_op(out_data, (a,), bw)


def log(a):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g / a.data)

    return make_op(np.log(a.data), (a,), bw)


def clamp_min(a, lo):
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo

    def bw(g):
        a._accumulate(g * mask)

    return make_op(np.maximum(a.data, np.float32(lo)), (a,), bw)


def clamp_max(a, hi):
    a = as_tensor(a)
    mask = a.data < hi

    def bw(g):
        a._accumulate(g * mask)

    return make_op(np.minimum(a.data, np.float32(hi)), (a,), bw)


# -- activations --------------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return make_op(np.maximum(a.data, 0), (a,), bw)


def elu(a, alpha=1.0):
    a = as_tensor(a)
    neg = np.float32(alpha) * (np.exp(np.minimum(a.data, 0)) - np.float32(1.0))
    out_data = np.where(a.data > 0, a.data, neg)

    def bw(g):
        # d/dx alpha*(e^x - 1) = alpha*e^x = y + alpha for x <= 0
        a._accumulate(g * np.where(a.data > 0, np.float32(1.0), neg + np.float32(alpha)))

    return make_op(out_data, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return make_op(out_data, (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return make_op(out_data, (a,), bw)


# -- shape / reduction ops ----------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.data.shape

    def bw(g):
        a._accumulate(g.reshape(in_shape))

    return make_op(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    in_shape = a.data.shape

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, in_shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, in_shape))

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    in_shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= in_shape[ax]
    inv = np.float32(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g * inv, in_shape))

    return make_op(a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32), (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape[1]} vs {b.data.shape[0]}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), bw)


def rms(a, axis=None, keepdims=False):
    """Root-mean-square over the given axes: L2 norm normalized by sqrt(count)."""
    return sqrt(tmean(square(a), axis=axis, keepdims=keepdims))
