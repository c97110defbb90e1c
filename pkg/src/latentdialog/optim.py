"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """AdamW over a list of ``(name, Parameter)`` pairs.

    Weight decay is applied to matrices only; vectors (biases, norm gains)
    are left undecayed.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr_now=None):
        s = self.state
        lr = s.lr if lr_now is None else lr_now
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if s.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * s.weight_decay
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)).astype(p.data.dtype, copy=False)

    def state_arrays(self):
        out = {}
        for name, _ in self.params:
            out[f"m/{name}"] = self.state.m[name]
            out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays, step):
        for name, _ in self.params:
            self.state.m[name] = np.array(arrays[f"m/{name}"], copy=True)
            self.state.v[name] = np.array(arrays[f"v/{name}"], copy=True)
        self.state.step = int(step)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total
