"""Minimal reverse-mode autodiff on numpy float64 arrays.

A Var wraps an ndarray plus an optional backward rule. Ops build a tape;
Var.backward() runs reverse accumulation over the tape. Only what the bag
classifiers need is implemented: dense linear algebra, the usual pointwise
nonlinearities, softmax/log-sum-exp, layer norm, gather/concat reshaping,
and a depthwise conv that dispatches to the kernels backend.

Everything is float64; gradient checks against central finite differences
are part of the test suite.
"""

import numpy as np
from scipy.special import expit

from . import kernels

__all__ = [
    "Var", "add", "sub", "mul", "div", "matmul", "transpose", "reshape",
    "getitem", "concat", "take_rows", "tanh", "sigmoid", "relu", "exp",
    "log", "vsum", "vmean", "vmax", "softmax", "log_softmax", "logsumexp",
    "layer_norm", "depthwise_conv", "dropout", "zero_grads",
    "gradient_max_rel_error",
]


def _sum_to_shape(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(grad.shape, shape)):
        if sdim == 1 and gdim != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """Node in the autodiff tape: an ndarray plus backward bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def backward(self):
        """Reverse-accumulate gradients from this scalar into the leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._vjp(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pgrad

    # operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


# --- arithmetic ------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data
    return Var(out_data, _parents=(a, b), _vjp=lambda g: (
        _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data
    return Var(out_data, _parents=(a, b), _vjp=lambda g: (
        _sum_to_shape(g, a.data.shape), _sum_to_shape(-g, b.data.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data
    return Var(out_data, _parents=(a, b), _vjp=lambda g: (
        _sum_to_shape(g * b.data, a.data.shape),
        _sum_to_shape(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data
    return Var(out_data, _parents=(a, b), _vjp=lambda g: (
        _sum_to_shape(g / b.data, a.data.shape),
        _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape)))


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out_data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return Var(out_data, _parents=(a, b), _vjp=vjp)


# --- shape ops -------------------------------------------------------


def transpose(a, axes=None):
    a = _lift(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return Var(out_data, _parents=(a,),
               _vjp=lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    a = _lift(a)
    return Var(a.data.reshape(shape), _parents=(a,),
               _vjp=lambda g: (g.reshape(a.data.shape),))


def getitem(a, key):
    a = _lift(a)
    out_data = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Var(out_data, _parents=(a,), _vjp=vjp)


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Var(out_data, _parents=tuple(parts), _vjp=vjp)


def take_rows(a, indices):
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.intp)
    out_data = a.data[indices]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return Var(out_data, _parents=(a,), _vjp=vjp)


# --- pointwise -------------------------------------------------------


def tanh(a):
    a = _lift(a)
    y = np.tanh(a.data)
    return Var(y, _parents=(a,), _vjp=lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _lift(a)
    y = expit(a.data)
    return Var(y, _parents=(a,), _vjp=lambda g: (g * y * (1.0 - y),))


def relu(a):
    a = _lift(a)
    mask = a.data > 0
    return Var(a.data * mask, _parents=(a,), _vjp=lambda g: (g * mask,))


def exp(a):
    a = _lift(a)
    y = np.exp(a.data)
    return Var(y, _parents=(a,), _vjp=lambda g: (g * y,))


def log(a):
    a = _lift(a)
    return Var(np.log(a.data), _parents=(a,), _vjp=lambda g: (g / a.data,))


# --- reductions ------------------------------------------------------


def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def vsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    return Var(out_data, _parents=(a,), _vjp=lambda g: (
        _restore_axes(g, a.data.shape, axis, keepdims).copy(),))


def vmean(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size
    return Var(out_data, _parents=(a,), _vjp=lambda g: (
        _restore_axes(g, a.data.shape, axis, keepdims) / count,))


def vmax(a, axis=None, keepdims=False):
    a = _lift(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            mask = (a.data == out_data)
        else:
            expanded = out_data if keepdims else np.expand_dims(out_data, axis)
            mask = (a.data == expanded)
        weights = mask / mask.sum(axis=axis, keepdims=True)
        return (_restore_axes(g, a.data.shape, axis, keepdims) * weights,)

    return Var(out_data, _parents=(a,), _vjp=vjp)


def logsumexp(a, axis=-1, keepdims=False):
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = (np.log(total) + m)
    soft = shifted / total
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)
    return Var(out_data, _parents=(a,), _vjp=lambda g: (
        _restore_axes(g, a.data.shape, axis, keepdims) * soft,))


def softmax(a, axis=-1):
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    return Var(y, _parents=(a,), _vjp=lambda g: (
        y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(ls)
    return Var(ls, _parents=(a,), _vjp=lambda g: (
        g - soft * g.sum(axis=axis, keepdims=True),))


# --- layers ----------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = _sum_to_shape(g * xhat, gamma.data.shape)
        dbeta = _sum_to_shape(g, beta.data.shape)
        return dx, dgamma, dbeta

    return Var(out_data, _parents=(x, gamma, beta), _vjp=vjp)


def depthwise_conv(x, kernel):
    """Depthwise same-padded conv on an (H, W, C) grid; kernel (k, k, C)."""
    x, kernel = _lift(x), _lift(kernel)
    k = kernel.data.shape[0]
    out_data = kernels.depthwise_conv2d(x.data, kernel.data)

    def vjp(g):
        g = np.ascontiguousarray(g)
        return (kernels.depthwise_conv2d_grad_input(g, kernel.data),
                kernels.depthwise_conv2d_grad_kernel(g, x.data, k))

    return Var(out_data, _parents=(x, kernel), _vjp=vjp)


def dropout(x, p, rng, train):
    """Inverted dropout; identity when train is False or p == 0."""
    if not train or p <= 0.0:
        return _lift(x)
    x = _lift(x)
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, mask)


# --- gradient checking ----------------------------------------------


def zero_grads(params):
    for p in params.values():
        p.grad = None


def gradient_max_rel_error(loss_fn, params, eps=1e-6):
    """Compare analytic gradients of loss_fn() with central finite differences.

    Args:
        loss_fn: zero-argument callable returning a scalar Var; must read the
            current values of params.
        params: dict name -> Var with requires_grad=True.
        eps: finite-difference step.

    Returns:
        Max over parameters of ||g_analytic - g_numeric|| / (||g_a|| + ||g_n||).
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
        ga, gn = analytic[name], numeric
        denom = np.linalg.norm(ga) + np.linalg.norm(gn)
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(ga - gn) / denom))
    return worst
