"""Small dense-tensor engine with reverse-mode autodiff, float64 only.

Tensors wrap numpy arrays and record a define-by-run tape; ``backward`` on a
scalar walks the tape once in reverse topological order. Everything runs on
the CPU in 64-bit floats, which keeps gradients checkable against central
finite differences to tight tolerances.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericalError

# Standard self-normalizing-network constants, 10 significant digits.
SELU_ALPHA = 1.6732632423
SELU_LAMBDA = 1.0507009873


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops tape recording (evaluation-only passes).

    Graphs are confined to a single thread, so a module flag suffices.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float64 array plus an optional tape node.

    `data` is row-major and must be finite; NaN/Inf are rejected at
    construction. Tensors are treated as immutable values once built
    (tests mutate leaf `.data` in place only to probe finite differences).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basics ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def backward(grad, out):
            return (_unbroadcast(grad, self.data.shape),
                    _unbroadcast(grad, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(grad, out):
            return (-grad,)

        return Tensor._from_op(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def backward(grad, out):
            return (_unbroadcast(grad * other.data, self.data.shape),
                    _unbroadcast(grad * self.data, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def backward(grad, out):
            return (_unbroadcast(grad / other.data, self.data.shape),
                    _unbroadcast(-grad * self.data / (other.data ** 2),
                                 other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        out_data = self.data ** e

        def backward(grad, out):
            return (grad * e * self.data ** (e - 1.0),)

        return Tensor._from_op(out_data, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul requires tensors with at least 2 dims")

        if self.ndim > 2 and other.ndim == 2:
            # Collapse leading dims into one BLAS call instead of a
            # looped batched matmul; this is the hot path in training.
            lead = self.data.shape[:-1]
            a2 = self.data.reshape(-1, self.data.shape[-1])
            out_data = (a2 @ other.data).reshape(lead + (other.data.shape[1],))

            def backward(grad, out):
                g2 = grad.reshape(-1, grad.shape[-1])
                return ((g2 @ other.data.T).reshape(self.data.shape),
                        a2.T @ g2)

            return Tensor._from_op(out_data, (self, other), backward)

        out_data = np.matmul(self.data, other.data)

        def backward(grad, out):
            ga = np.matmul(grad, np.swapaxes(other.data, -1, -2))
            gb = np.matmul(np.swapaxes(self.data, -1, -2), grad)
            return (_unbroadcast(ga, self.data.shape),
                    _unbroadcast(gb, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    def __getitem__(self, index):
        out_data = self.data[index]
        if np.isscalar(out_data) or out_data.ndim == 0:
            out_data = np.asarray(out_data, dtype=np.float64)
        else:
            out_data = np.ascontiguousarray(out_data)

        def backward(grad, out):
            full = np.zeros_like(self.data)
            np.add.at(full, index, grad)
            return (full,)

        return Tensor._from_op(out_data, (self,), backward)

    # -- shape ops ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(grad, out):
            return (grad.reshape(self.data.shape),)

        return Tensor._from_op(out_data, (self,), backward)

    def swapaxes(self, a, b):
        out_data = np.swapaxes(self.data, a, b)

        def backward(grad, out):
            return (np.swapaxes(grad, a, b),)

        return Tensor._from_op(out_data, (self,), backward)

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape):
        out_data = np.broadcast_to(self.data, shape)

        def backward(grad, out):
            return (_unbroadcast(grad, self.data.shape),)

        return Tensor._from_op(np.ascontiguousarray(out_data), (self,), backward)

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        out_data = np.asarray(out_data, dtype=np.float64)

        def backward(grad, out):
            g = np.asarray(grad)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        return Tensor._from_op(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise kernels --------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(grad, out):
            return (grad * out.data,)

        return Tensor._from_op(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(grad, out):
            return (grad / self.data,)

        return Tensor._from_op(out_data, (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(grad, out):
            return (grad * 0.5 / out.data,)

        return Tensor._from_op(out_data, (self,), backward)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(grad, out):
            return (grad * (self.data > 0.0),)

        return Tensor._from_op(out_data, (self,), backward)

    def detach(self):
        return Tensor(self.data.copy())

    # -- backward -------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar root.

        Returns a dict mapping each reachable requires_grad Tensor to its
        gradient array; the same arrays are assigned to `.grad` (overwriting
        any previous value, so repeated calls are bitwise reproducible).
        """
        if self.data.size != 1:
            raise NumericalError("backward requires a scalar root")
        if not self.requires_grad:
            return {}

        order = []
        seen = set()
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

        grads = {id(self): np.ones_like(self.data)}
        result = {}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad
            result[node] = grad
            if node._backward is None:
                continue
            parent_grads = node._backward(grad, node)
            for parent, pgrad in zip(node._parents, parent_grads):
                if not parent.requires_grad or pgrad is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pgrad if acc is None else acc + pgrad
        return result


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value):
    """Wrap raw data as a non-differentiable Tensor."""
    return Tensor(value, requires_grad=False)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad, out):
        pieces = []
        for i in range(len(tensors)):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(grad[tuple(index)])
        return tuple(pieces)

    return Tensor._from_op(out_data, tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(grad, out):
        moved = np.moveaxis(grad, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return Tensor._from_op(out_data, tensors, backward)


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis` (max-subtraction)."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise NumericalError("softmax of an empty tensor")
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = x - constant(shift)
    e = z.exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = (x - constant(shift)).exp()
    out = e.sum(axis=axis, keepdims=True).log() + constant(shift)
    if not keepdims:
        out = out.reshape(tuple(s for i, s in enumerate(out.shape) if i != (axis % x.ndim)))
    return out


def selu(x):
    """Scaled exponential linear unit with the standard SNN constants."""
    x = as_tensor(x)
    pos = x.data > 0.0
    out_data = np.where(pos, SELU_LAMBDA * x.data,
                        SELU_LAMBDA * SELU_ALPHA * np.expm1(x.data))

    def backward(grad, out):
        local = np.where(pos, SELU_LAMBDA,
                         SELU_LAMBDA * SELU_ALPHA * np.exp(x.data))
        return (grad * local,)

    return Tensor._from_op(out_data, (x,), backward)


def sqrt_clamped(x):
    """sqrt(max(x, 0)) with zero gradient on the clamped region."""
    x = as_tensor(x)
    clipped = np.maximum(x.data, 0.0)
    out_data = np.sqrt(clipped)

    def backward(grad, out):
        safe = np.where(out_data > 0.0, out_data, 1.0)
        local = np.where(x.data > 0.0, 0.5 / safe, 0.0)
        return (grad * local,)

    return Tensor._from_op(out_data, (x,), backward)


def pairwise_distances(x):
    """Euclidean distance matrix between rows of a (n, d) tensor.

    The diagonal is exactly zero; the gradient there (and at any coincident
    pair of rows) is taken as zero, which is the usual subgradient choice.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("pairwise_distances expects a 2-d tensor")
    sq = np.sum(x.data ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x.data @ x.data.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    dist = np.sqrt(d2)

    def backward(grad, out):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0.0, grad / dist, 0.0)
        sym = ratio + ratio.T
        return (x.data * sym.sum(axis=1, keepdims=True) - sym @ x.data,)

    return Tensor._from_op(dist, (x,), backward)


# -- gradient checking ----------------------------------------------------

def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x))
        flat[i] = orig - h
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError("function returned a non-finite value "
                                 "during finite differencing")
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(build_loss, leaves, h=1e-5, coords=None, rng=None):
    """Compare backward() gradients to central differences on leaf tensors.

    `build_loss()` must rebuild the scalar loss from the current `.data` of
    the given leaf tensors. Returns the max discrepancy under
    |analytic - fd| / max(1, |analytic|, |fd|), i.e. relative error for O(1)
    gradients with an absolute floor for near-zero ones. When `coords` is
    set, only that many randomly chosen coordinates per leaf are probed.
    """
    loss = build_loss()
    grads = loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        aflat = analytic.reshape(-1)
        if coords is None or coords >= flat.size:
            indices = range(flat.size)
        else:
            indices = rng.integers(0, flat.size, size=coords)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            hi = build_loss().item()
            flat[i] = orig - h
            lo = build_loss().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]), abs(fd))
            worst = max(worst, err)
    return worst


# -- deterministic RNG -----------------------------------------------------

class Rng:
    """Seeded PCG64 stream with stable named substreams.

    The same seed yields the same stream on every platform (PCG64 is a
    documented, fixed algorithm); substream seeds are derived by hashing
    the parent seed with the child tag, so adding streams never perturbs
    existing ones.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag):
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "big"))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def exponential(self, scale=1.0, size=None):
        return self._gen.exponential(scale, size)
