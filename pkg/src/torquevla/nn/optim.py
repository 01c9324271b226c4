import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay.

    ``params`` is a sequence of (name, Parameter) pairs; moment buffers are
    keyed by name so optimizer state can be checkpointed.
    """

    def __init__(self, named_params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.state = OptimizerState(lr, weight_decay, betas[0], betas[1], eps)
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, lr=None):
        adamw_step(self.state, self.params, lr)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


def adamw_step(state: OptimizerState, named_params, lr=None):
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = p.grad
        if state.weight_decay:
            p.data = p.data * (1.0 - lr * state.weight_decay)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def cosine_lr(step, total, base_lr, warmup=0, min_ratio=0.0):
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))
