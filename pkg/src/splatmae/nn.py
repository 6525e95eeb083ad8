"""Small neural-network layer library on top of the autodiff Tensor.

Modules register parameters as Tensor attributes with requires_grad set;
``parameters()`` walks attributes (and lists of sub-modules) recursively and
returns a flat dict of dotted names, which the optimizer and the checkpoint
writer both consume.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concatenate, layer_norm, softmax


def _init(rng, shape, scale):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class Module:
    def parameters(self):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng):
        self.weight = _init(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class MLP(Module):
    """Two-layer GELU MLP."""

    def __init__(self, d_in, d_hidden, d_out, rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(self.fc1(x).gelu())


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x):
        # x: (T, C) token sequence, no batch axis
        n, dim = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x)  # (T, 3C)
        q = qkv[:, :dim].reshape(n, h, hd).transpose(1, 0, 2)
        k = qkv[:, dim:2 * dim].reshape(n, h, hd).transpose(1, 0, 2)
        v = qkv[:, 2 * dim:].reshape(n, h, hd).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(hd))  # (H, T, T)
        attn = softmax(scores, axis=-1)
        out = (attn @ v).transpose(1, 0, 2).reshape(n, dim)
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerStack(Module):
    def __init__(self, dim, heads, depth, rng, mlp_ratio=4):
        self.blocks = [TransformerBlock(dim, heads, rng, mlp_ratio) for _ in range(depth)]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def load_state(module, state):
    """Copy raw arrays from a {name: ndarray} dict into module parameters."""
    params = module.parameters()
    missing = set(params) - set(state)
    extra = set(state) - set(params)
    if missing or extra:
        raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.copy()
