"""Differentiable ops over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure mapping
the output gradient to one gradient per parent (``None`` for non-differentiable
inputs).
"""
import numpy as np

from .backend import kernels
from .tensor import Tensor, make_result


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), back)


def sum(x):
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), back)


def mean(x):
    n = x.size

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), back)


# -- shape --------------------------------------------------------------------

def reshape(x, shape):
    def back(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), back)


def getitem(x, index):
    def back(g):
        full = np.zeros_like(x.data)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_result(x.data[index], (x,), back)


def _has_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, back)


# -- dense layers -------------------------------------------------------------

def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = out.reshape(lead + (weight.shape[0],))
    return make_result(out, parents, back)


# -- activations --------------------------------------------------------------

def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)

    def back(g):
        return (g * s * (1 - s),)

    return make_result(s, (x,), back)


def tanh(x):
    t = np.tanh(x.data)

    def back(g):
        return (g * (1 - t * t),)

    return make_result(t, (x,), back)


def relu(x):
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), back)


def _bcl(a):
    """View a ``(B, C, ...)`` array as contiguous ``(B, C, L)``."""
    return np.ascontiguousarray(a).reshape(a.shape[0], a.shape[1], -1)


def prelu(x, alpha):
    """Per-channel PReLU; ``alpha`` has one slope per channel on axis 1."""
    k = kernels()
    x3 = _bcl(x.data)
    out = np.empty_like(x3)
    k.prelu_forward(x3, alpha.data, out)

    def back(g):
        gx = np.empty_like(x3)
        ga = np.zeros(alpha.shape, dtype=np.float64)
        k.prelu_backward(_bcl(g), x3, alpha.data, gx, ga)
        return gx.reshape(x.shape), ga.astype(alpha.dtype)

    return make_result(out.reshape(x.shape), (x, alpha), back)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over every axis but 1.

    In training mode the batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place; otherwise the buffers are used.
    """
    k = kernels()
    x3 = _bcl(x.data)
    C = x3.shape[1]
    if training:
        n = x3.shape[0] * x3.shape[2]
        mu64 = np.empty(C)
        var64 = np.empty(C)
        k.channel_moments(x3, mu64, var64)
        running_mean *= 1 - momentum
        running_mean += (momentum * mu64).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * var64 * (n / max(n - 1, 1))).astype(running_var.dtype)
    else:
        mu64 = running_mean.astype(np.float64)
        var64 = running_var.astype(np.float64)
    inv64 = 1.0 / np.sqrt(var64 + eps)
    mu = mu64.astype(x.dtype)
    inv = inv64.astype(x.dtype)
    scale = (gamma.data * inv).astype(x.dtype)
    shift = (beta.data - mu * scale).astype(x.dtype)
    out = np.empty_like(x3)
    k.channel_affine(x3, scale, shift, out)

    def back(g):
        g3 = _bcl(g)
        sum_g = np.empty(C)
        sum_gxhat = np.empty(C)
        k.bn_backward_sums(g3, x3, mu, inv, sum_g, sum_gxhat)
        gx = None
        if x.requires_grad:
            gx = np.empty_like(x3)
            k.bn_backward_input(g3, x3, mu, inv, gamma.data, sum_g, sum_gxhat, training, gx)
            gx = gx.reshape(x.shape)
        return gx, sum_gxhat.astype(gamma.dtype), sum_g.astype(beta.dtype)

    return make_result(out.reshape(x.shape), (x, gamma, beta), back)


# -- probabilities and losses -------------------------------------------------

def _softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    p = _softmax(x.data, axis)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), back)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    B, C = logits.shape
    if labels.shape[0] != B:
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(B), labels] - logsum
    loss = np.asarray(-logp.mean(), dtype=z.dtype)

    def back(g):
        p = _softmax(z, axis=1)
        p[np.arange(B), labels] -= 1
        return (p * (g / B),)

    return make_result(loss, (logits,), back)


def mse(target, estimate):
    """Element-mean squared difference (each sample weighted equally)."""
    target = target if isinstance(target, Tensor) else _lift(target, estimate)
    estimate = _lift(estimate, target)
    if target.shape != estimate.shape:
        raise ValueError(f"mse: shape mismatch {target.shape} vs {estimate.shape}")
    diff = estimate.data - target.data
    n = diff.size

    def back(g):
        gd = (2.0 * g / n) * diff
        return -gd, gd

    return make_result(np.asarray((diff * diff).mean(), dtype=diff.dtype), (target, estimate), back)
