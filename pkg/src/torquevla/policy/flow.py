"""Flow-matching objective and Euler sampler over joint action/torque chunks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import tensor as T
from ..nn.tensor import no_grad


@dataclass
class NoisyChunk:
    Z: np.ndarray  # (B, H, d_z) clean chunk [A; T]
    epsilon: np.ndarray
    alpha: np.ndarray  # (B,)

    @property
    def Z_alpha(self) -> np.ndarray:
        a = self.alpha.reshape(-1, 1, 1)
        return a * self.Z + (1.0 - a) * self.epsilon

    @property
    def target(self) -> np.ndarray:
        return self.epsilon - self.Z


def make_noisy(Z, rng, alpha=None) -> NoisyChunk:
    Z = np.asarray(Z, dtype=float)
    eps = rng.standard_normal(Z.shape)
    if alpha is None:
        alpha = rng.uniform(0.0, 1.0, Z.shape[0])
    return NoisyChunk(Z, eps, np.asarray(alpha, dtype=float).reshape(Z.shape[0]))


@dataclass
class LossBreakdown:
    total: float
    action: float
    torque: float | None
    beta: float


def flow_loss(net, batch: dict, rng, noisy: NoisyChunk | None = None):
    """Return (loss tensor, breakdown).

    ``batch`` holds normalized arrays: context (B, d_ctx), q (B, d_a),
    history (B, K, d_tau), actions (B, H, d_a) and, when the network predicts
    torque, torque (B, H, d_tau).
    """
    c = net.config
    A = batch["actions"]
    if c.predict_torque:
        Z = np.concatenate([A, batch["torque"]], axis=-1)
    else:
        Z = A
    if noisy is None:
        noisy = make_noisy(Z, rng)
    v = net(batch["context"], batch["q"], batch.get("history"), noisy.Z_alpha, noisy.alpha)
    target = noisy.target
    loss_a = T.mse(v[..., : c.d_a], target[..., : c.d_a])
    if not c.predict_torque:
        return loss_a, LossBreakdown(float(loss_a.data), float(loss_a.data), None, 0.0)
    beta = c.effective_beta
    loss_t = T.mse(v[..., c.d_a :], target[..., c.d_a :])
    loss = loss_a + beta * loss_t
    return loss, LossBreakdown(float(loss.data), float(loss_a.data), float(loss_t.data), beta)


def integrate(field, eps, steps: int) -> np.ndarray:
    """Euler from alpha=0 (pure noise) to alpha=1 along dZ/dalpha = -v.

    ``field(z, alpha)`` returns the predicted ``eps - Z`` for the batch.
    """
    z = np.array(eps, dtype=float)
    dt = 1.0 / steps
    for i in range(steps):
        alpha = np.full(z.shape[0], i * dt)
        z = z - dt * field(z, alpha)
    return z


def sample_chunks(net, context, q, history, rng, perturb=None, eps=None):
    """Sample normalized chunks (B, H, d_z) for a batch of observations."""
    c = net.config
    context = np.asarray(context, dtype=float)
    B = context.shape[0]
    if eps is None:
        eps = rng.standard_normal((B, c.horizon_H, c.d_z))
    with no_grad():
        memory, dec_tokens, pad = net.encode(context, history, perturb)

        def field(z, alpha):
            return net.decode(memory, dec_tokens, pad, q, z, alpha, perturb).data

        return integrate(field, eps, c.flow_steps)
