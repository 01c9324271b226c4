"""Parameterised building blocks on top of the tensor ops."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Module:
    """Container whose Parameters and sub-Modules are discovered by attribute name."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, scale=1.0):
        bound = scale / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = Parameter(rng.uniform(-bound, bound, d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x):
        return T.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """d_in -> hidden -> d_out with a Swish in between."""

    def __init__(self, d_in, hidden, d_out, rng):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def __call__(self, x):
        return self.fc2(T.swish(self.fc1(x)))


class Attention(Module):
    def __init__(self, d_model, d_kv, n_heads, rng):
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_kv, d_model, rng)
        self.v = Linear(d_kv, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self.n_heads = n_heads

    def __call__(self, x, context=None, mask=None):
        src = x if context is None else context
        h = T.attention(self.q(x), self.k(src), self.v(src), mask=mask, n_heads=self.n_heads)
        return self.o(h)


class Block(Module):
    """Pre-norm transformer block with optional cross-attention."""

    def __init__(self, d_model, n_heads, rng, d_context=None, mlp_ratio=2):
        self.ln1 = LayerNorm(d_model)
        self.attn = Attention(d_model, d_model, n_heads, rng)
        if d_context is not None:
            self.ln_x = LayerNorm(d_model)
            self.cross = Attention(d_model, d_context, n_heads, rng)
        else:
            self.ln_x = self.cross = None
        self.ln2 = LayerNorm(d_model)
        self.mlp = MLP(d_model, mlp_ratio * d_model, d_model, rng)

    def __call__(self, x, context=None, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        if self.cross is not None:
            x = x + self.cross(self.ln_x(x), context=context)
        return x + self.mlp(self.ln2(x))
