"""AdamW with decoupled weight decay.

Decay multiplies parameters by (1 - lr * weight_decay) independently of the
Adam moment update, so a zero gradient still shrinks the parameter and the
adaptive step is untouched by the decay term.
"""

from __future__ import annotations

import numpy as np


class MissingGradError(RuntimeError):
    pass


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, lr_scale=None):
        """params: {name: Tensor}; lr_scale optionally maps a name prefix to a
        per-parameter learning-rate multiplier."""
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def _lr_for(self, name):
        for prefix, scale in self.lr_scale.items():
            if name == prefix or name.startswith(prefix + "."):
                return self.lr * scale
        return self.lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, zero_grad=False):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter '{name}' has no gradient; run backward first")
            g = p.grad
            lr = self._lr_for(name)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if zero_grad:
            self.zero_grad()
