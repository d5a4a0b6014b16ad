"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; the only in-place mutation is the
optimizer updating leaf parameters between steps. Broadcasting is limited to
Python scalars plus two explicit helpers (:func:`add_column`,
:func:`scale_rows`) so each backward rule stays easy to audit.

Batches are stored column-wise for linear layers: an input of ``n`` features
and ``B`` samples has shape ``(n, B)``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root):
    # iterative DFS; returns nodes with each node before its parents
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, name=""):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = name
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), backward, "matmul")


def bmm(a, b):
    """Batched matmul over identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.data.ndim < 3 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), backward, "bmm")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes).copy(), (x,), backward, "transpose")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(data, (x,), backward, "reshape")


# -- pointwise --------------------------------------------------------------

def _binary(a, b, op):
    """Resolve operands: same-shape tensors, or a tensor and a Python scalar."""
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return as_tensor(a), float(b)
    if isinstance(a, (int, float)):
        return as_tensor(b), float(a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, op)
    return a, b


def add(a, b):
    a, b = _binary(a, b, "add")
    if isinstance(b, float):
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    return add(a, neg(b))


def neg(x):
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _binary(a, b, "mul")
    if isinstance(b, float):
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None,
                g * ad if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def clamp_min(x, threshold=0.0):
    """max(x, threshold); gradient passes only where x > threshold."""
    x = as_tensor(x)
    mask = x.data > threshold
    return _make(np.where(mask, x.data, threshold), (x,), lambda g: (g * mask,), "clamp_min")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu_tanh(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_K * xd ** 3))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner),)

    return _make(0.5 * xd * (1.0 + t), (x,), backward, "gelu_tanh")


def elementwise(op_id, *args):
    """Dispatch by name: add, mul, relu, gelu_tanh, clamp_min."""
    ops = {"add": add, "mul": mul, "relu": relu, "gelu_tanh": gelu_tanh, "clamp_min": clamp_min}
    if op_id not in ops:
        raise ValueError(f"unknown elementwise op {op_id!r}")
    return ops[op_id](*args)


def add_column(x, b):
    """x (m, N) plus vector b (m,) added to every column."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[0],):
        raise ShapeError(f"add_column: {x.shape} and bias {b.shape}")

    def backward(g):
        return (g, g.sum(axis=1) if b.requires_grad else None)

    return _make(x.data + b.data[:, None], (x, b), backward, "add_column")


def scale_rows(x, s):
    """Row i of x (r, N) multiplied by s[i]; the diag(s) @ x product."""
    x, s = as_tensor(x), as_tensor(s)
    if x.data.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: {x.shape} and scale {s.shape}")
    xd, sd = x.data, s.data

    def backward(g):
        return (g * sd[:, None] if x.requires_grad else None,
                (g * xd).sum(axis=1) if s.requires_grad else None)

    return _make(xd * sd[:, None], (x, s), backward, "scale_rows")


# -- reductions and normalisation -------------------------------------------

def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), backward, "mean")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layernorm(x, gain, bias, eps=1e-5):
    """Normalise each column of x (d, N) over its d features."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[0]
    if x.data.ndim != 2 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd[:, None]
        dx = inv / d * (d * dxhat - dxhat.sum(axis=0, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=0, keepdims=True))
        return (dx if x.requires_grad else None,
                (g * xhat).sum(axis=1) if gain.requires_grad else None,
                g.sum(axis=1) if bias.requires_grad else None)

    y = xhat * gd[:, None] + bias.data[:, None]
    return _make(y, (x, gain, bias), backward, "layernorm")


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]; logits are (B, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (B, C), got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {B} logits rows but labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - z[rows, labels]))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


# -- gradient checking ------------------------------------------------------

def grad_check(f, params, h=1e-5, n_probe=20, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. ``n_probe`` scalar coordinates are sampled uniformly over all
    parameter entries. The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if rng is None:
        picks = np.linspace(0, total - 1, min(n_probe, total)).astype(np.int64)
    else:
        picks = rng.integers(0, total, n_probe)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = np.unravel_index(int(flat - offsets[k]), params[k].shape)
            view = params[k].data
            orig = view[idx]
            view[idx] = orig + h
            fp = f().item()
            view[idx] = orig - h
            fm = f().item()
            view[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("grad_check: objective is not finite under perturbation")
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[k][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
