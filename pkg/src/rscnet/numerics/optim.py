"""SGD with classic momentum (the default) or Adam, L2 weight decay, cosine annealing."""
import math
from dataclasses import dataclass, field

import numpy as np


METHODS = ("sgd", "adam")


@dataclass
class OptimizerState:
    """Optimizer hyperparameters and per-parameter slots.

    For Adam, ``momentum`` is the first-moment decay and ``velocity`` holds the
    first moments; ``second_moment`` is used by Adam only.
    """
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)
    step_index: int = 0
    total_steps: int = 0
    method: str = "sgd"
    beta2: float = 0.999
    eps: float = 1e-8
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.method not in METHODS:
            raise ValueError(f"optimizer method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must lie in [0, 1), got {self.beta2}")

    def hyperparameters(self):
        return {"learning_rate": self.learning_rate, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "step_index": self.step_index,
                "total_steps": self.total_steps, "method": self.method,
                "beta2": self.beta2, "eps": self.eps}


def _checked_grad(state, name, param, grads):
    g = grads.get(name)
    if g is None:
        return np.zeros_like(param.data)
    if g.shape != param.shape:
        raise ValueError(f"gradient for {name!r} has shape {g.shape}, param {param.shape}")
    if not np.isfinite(g).all():
        raise FloatingPointError(f"non-finite gradient for {name!r} at step {state.step_index}")
    return g


def _slot(store, name, param):
    v = store.get(name)
    if v is None:
        v = store[name] = np.zeros_like(param.data)
    elif v.shape != param.shape:
        raise ValueError(f"optimizer slot for {name!r} has shape {v.shape}, param {param.shape}")
    return v


def sgd_step(state, params, grads, lr=None):
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    ``v <- mu*v + (g + wd*w)``; ``w <- w - lr*v``. Parameters without a gradient
    entry are treated as having zero gradient. ``lr`` overrides
    ``state.learning_rate`` for this step only (used by the schedule).
    """
    lr = state.learning_rate if lr is None else lr
    for name, param in params.items():
        g = _checked_grad(state, name, param, grads)
        v = _slot(state.velocity, name, param)
        step = g + state.weight_decay * param.data if state.weight_decay else g
        v *= state.momentum
        v += step.astype(v.dtype, copy=False)
        param.data -= (lr * v).astype(param.dtype, copy=False)
    state.step_index += 1
    return params, state


def adam_step(state, params, grads, lr=None):
    """Adam with bias correction; L2 decay is added to the gradient as in SGD.

    ``m <- b1*m + (1-b1)*g``; ``s <- b2*s + (1-b2)*g^2``;
    ``w <- w - lr * m_hat / (sqrt(s_hat) + eps)``.
    """
    lr = state.learning_rate if lr is None else lr
    b1, b2 = state.momentum, state.beta2
    t = state.step_index + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, param in params.items():
        g = _checked_grad(state, name, param, grads)
        if state.weight_decay:
            g = g + state.weight_decay * param.data
        g = g.astype(param.dtype, copy=False)
        m = _slot(state.velocity, name, param)
        s = _slot(state.second_moment, name, param)
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * (g * g)
        param.data -= (lr / c1) * m / (np.sqrt(s / c2) + state.eps)
    state.step_index += 1
    return params, state


def optimizer_step(state, params, grads, lr=None):
    """Dispatch on ``state.method``."""
    step = adam_step if state.method == "adam" else sgd_step
    return step(state, params, grads, lr)


def cosine_lr(step, total, lr0):
    """``0.5 * lr0 * (1 + cos(pi * step / total))``, never below zero."""
    if total <= 0:
        raise ValueError("cosine_lr: total must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total}]")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total)))
