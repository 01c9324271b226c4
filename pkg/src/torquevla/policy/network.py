"""Encoder/decoder velocity-field network for chunked flow matching.

Encoder tokens: context tokens, then torque tokens for the ``enc_*`` modes.
Decoder tokens: torque tokens for the ``dec_post_*`` modes, the state token
``[q; pad]``, then one token per chunk step. The decoder cross-attends to
the encoder output and the head reads the chunk tokens only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..nn import Linear, Module, Parameter
from ..nn import tensor as T
from .config import PolicyConfig

N_FREQ = 8


class TorqueAdapter(Module):
    """d_in -> 2w -> Swish -> w."""

    def __init__(self, d_in, width, rng):
        self.fc1 = Linear(d_in, 2 * width, rng)
        self.fc2 = Linear(2 * width, width, rng)
        self.d_in, self.width = d_in, width

    def __call__(self, x):
        return self.fc2(T.swish(self.fc1(x)))


class RNNAggregator(Module):
    """Elman recurrence over the K frames; the last hidden state feeds a projection."""

    def __init__(self, d_tau, width, rng):
        self.inp = Linear(d_tau, width, rng)
        self.rec = Linear(width, width, rng, bias=False)
        self.out = Linear(width, width, rng)
        self.width = width

    def __call__(self, hist):
        B, K, _ = hist.shape
        x = self.inp(hist)
        h = None
        for k in range(K):
            xk = T.reshape(x[:, k, :], (B, self.width))
            h = T.tanh(xk if h is None else xk + self.rec(h))
        return T.reshape(self.out(h), (B, 1, self.width))


class AttentionAggregator(Module):
    """A learned query pools per-frame adapter tokens into one."""

    def __init__(self, d_tau, width, n_heads, rng):
        self.frame = TorqueAdapter(d_tau, width, rng)
        self.query = Parameter(rng.normal(0.0, 0.02, (1, 1, width)))
        self.pool = nn.Attention(width, width, n_heads, rng)
        self.width = width

    def __call__(self, hist):
        B = hist.shape[0]
        frames = self.frame(hist)
        q = T.broadcast_to(self.query, (B, 1, self.width))
        return self.pool(q, context=frames)


@dataclass
class Perturbation:
    """Inference-time perturbations used by the sensitivity experiments."""

    site: str = "none"  # none | encoder | decoder
    kind: str = "noise"  # noise | extra_token
    sigma: float = 0.1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def active(self, site):
        return self.site == site


def fourier_features(alpha):
    alpha = np.asarray(alpha, dtype=float).reshape(-1, 1)
    freqs = np.pi * 2.0 ** np.arange(N_FREQ // 2)
    return np.concatenate([np.sin(alpha * freqs), np.cos(alpha * freqs)], axis=1)


class FlowNetwork(Module):
    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        c = self.config = config
        we, wd = c.w_enc, c.w_dec
        self.ctx_in = Linear(c.d_ctx, c.n_ctx_tokens * we, rng)
        self.enc_pos = Parameter(rng.normal(0.0, 0.02, (c.n_ctx_tokens + c.history_K + 1, we)))
        self.encoder = [nn.Block(we, c.n_heads, rng) for _ in range(c.enc_depth)]
        self.enc_ln = nn.LayerNorm(we)

        self.state_in = Linear(c.d_a + c.state_pad, wd, rng)
        self.action_in = Linear(c.d_a, wd, rng)
        # separate map keeps the action path bit-identical when the torque block is added
        self.torque_in = Linear(c.d_tau, wd, rng, bias=False) if c.predict_torque else None
        if self.torque_in is not None:
            self.torque_in.weight.data[:] = 0.0
        self.time_in = Linear(N_FREQ, wd, rng)
        self.dec_pos = Parameter(rng.normal(0.0, 0.02, (c.history_K + 3 + c.horizon_H, wd)))
        self.decoder = [nn.Block(wd, c.n_heads, rng, d_context=we) for _ in range(c.dec_depth)]
        self.dec_ln = nn.LayerNorm(wd)
        self.head = Linear(wd, c.d_a, rng)
        if c.predict_torque:
            expand_output_head(self, rng, c.d_tau, c.head_init_scale)

        self.adapter = None
        if c.uses_torque and c.torque_mode != "dec_pre":
            width = we if c.site == "encoder" else wd
            if c.torque_mode.endswith("agg") and c.aggregator == "rnn":
                self.adapter = RNNAggregator(c.d_tau, width, rng)
            elif c.torque_mode.endswith("agg") and c.aggregator == "attention":
                self.adapter = AttentionAggregator(c.d_tau, width, c.n_heads, rng)
            else:
                d_in = c.history_K * c.d_tau if c.torque_mode.endswith("agg") else c.d_tau
                self.adapter = TorqueAdapter(d_in, width, rng)

    # -- token construction --------------------------------------------------

    def embed_torque(self, history):
        """Tokens for the configured torque mode.

        Returns (tokens or None, site, padding write or None). ``history`` is
        (B, K, d_tau), normalized, oldest frame first.
        """
        c = self.config
        mode = c.torque_mode
        if mode == "none":
            return None, "none", None
        history = np.asarray(history, dtype=float)
        if history.ndim != 3 or history.shape[2] != c.d_tau:
            raise ValueError(f"torque history must be (B, K, {c.d_tau}), got {history.shape}")
        B = history.shape[0]
        last = history[:, -1, :]
        if mode == "dec_pre":
            return None, "decoder", last
        if mode.endswith("single"):
            tok = self.adapter(last.reshape(B, 1, c.d_tau))
        elif mode.endswith("hist_frames"):
            if history.shape[1] != c.history_K:
                raise ValueError(f"expected {c.history_K} history frames, got {history.shape[1]}")
            tok = self.adapter(history)
        else:
            if history.shape[1] != c.history_K:
                raise ValueError(f"expected {c.history_K} history frames, got {history.shape[1]}")
            if isinstance(self.adapter, TorqueAdapter):
                tok = self.adapter(history.reshape(B, 1, c.history_K * c.d_tau))
            else:
                tok = self.adapter(history)
        return tok, c.site, None

    def state_vector(self, q, pad_write=None):
        c = self.config
        q = np.asarray(q, dtype=float)
        s = np.zeros((q.shape[0], c.d_a + c.state_pad))
        s[:, : c.d_a] = q
        if pad_write is not None:
            s[:, c.d_a + c.state_pad - c.d_tau :] = pad_write
        return s

    def encode(self, context, history=None, perturb: Perturbation | None = None, taps=None):
        """Encoder output (B, S, w_enc) plus the torque tokens destined for the decoder."""
        c = self.config
        context = np.asarray(context, dtype=float)
        B = context.shape[0]
        toks = T.reshape(self.ctx_in(context), (B, c.n_ctx_tokens, c.w_enc))
        tq, site, pad = self.embed_torque(history) if c.uses_torque else (None, "none", None)
        parts = [toks]
        if site == "encoder":
            parts.append(tq)
        x = T.concat(parts, axis=1) if len(parts) > 1 else toks
        if perturb is not None and perturb.active("encoder") and perturb.kind == "extra_token":
            # appended in the torque-token slot; positions follow the token index
            x = T.concat([x, perturb.rng.normal(0.0, 1.0, (B, 1, c.w_enc))], axis=1)
        x = x + self.enc_pos[: x.shape[1]]
        if perturb is not None and perturb.active("encoder") and perturb.kind == "noise":
            x = x + perturb.rng.normal(0.0, perturb.sigma, x.shape)
        for i, blk in enumerate(self.encoder):
            x = blk(x)
            if taps is not None:
                taps[f"enc{i}"] = x.data
        memory = self.enc_ln(x)
        dec_tokens = tq if site == "decoder" else None
        return memory, dec_tokens, pad

    def decode(self, memory, dec_tokens, pad, q, z_alpha, alpha, perturb=None, taps=None):
        """Velocity prediction (B, H, d_z)."""
        c = self.config
        B = z_alpha.shape[0]
        state = T.reshape(self.state_in(self.state_vector(q, pad)), (B, 1, c.w_dec))
        if perturb is not None and perturb.active("decoder") and perturb.kind == "noise":
            state = state + perturb.rng.normal(0.0, perturb.sigma, state.shape)
        z_alpha = np.asarray(z_alpha, dtype=float)
        chunk = self.action_in(z_alpha[..., : c.d_a])
        if self.torque_in is not None:
            chunk = chunk + self.torque_in(z_alpha[..., c.d_a :])
        temb = self.time_in(fourier_features(alpha))
        chunk = chunk + T.reshape(temb, (B, 1, c.w_dec))
        parts = [state, chunk]
        if dec_tokens is not None:
            parts.insert(0, dec_tokens)
        if perturb is not None and perturb.active("decoder") and perturb.kind == "extra_token":
            # prepended in the torque-token slot; later positions shift by one
            parts.insert(0, perturb.rng.normal(0.0, 1.0, (B, 1, c.w_dec)))
        x = T.concat(parts, axis=1)
        x = x + self.dec_pos[: x.shape[1]]
        n_prefix = x.shape[1] - c.horizon_H
        for i, blk in enumerate(self.decoder):
            x = blk(x, context=memory)
            if taps is not None:
                taps[f"dec{i}"] = x.data
                taps["dec_prefix"] = n_prefix
        out = self.head(self.dec_ln(x[:, n_prefix:, :]))
        return out

    def __call__(self, context, q, history, z_alpha, alpha, perturb=None, taps=None):
        memory, dec_tokens, pad = self.encode(context, history, perturb, taps)
        return self.decode(memory, dec_tokens, pad, q, z_alpha, alpha, perturb, taps)

    def decoder_token_count(self) -> int:
        c = self.config
        n = 1 + c.horizon_H
        if c.site == "decoder":
            n += c.n_torque_tokens
        return n

    def encoder_token_count(self) -> int:
        c = self.config
        return c.n_ctx_tokens + (c.n_torque_tokens if c.site == "encoder" else 0)


def expand_output_head(net: FlowNetwork, rng, d_tau: int, scale: float = 0.01):
    """Widen the head by ``d_tau`` torque outputs and add the torque input map.

    Existing action columns are copied; new head columns are drawn at
    ``scale`` times the default init and the new input map starts at zero, so
    action outputs are unchanged on the first forward pass.
    """
    wd = net.head.d_in
    d_old = net.head.d_out
    bound = scale / np.sqrt(wd)
    W = np.concatenate([net.head.weight.data, rng.uniform(-bound, bound, (wd, d_tau))], axis=1)
    b = np.concatenate([net.head.bias.data, np.zeros(d_tau)])
    net.head.weight = Parameter(W)
    net.head.bias = Parameter(b)
    net.head.d_out = d_old + d_tau
    if net.torque_in is None:
        net.torque_in = Linear(d_tau, wd, rng, bias=False)
        net.torque_in.weight.data[:] = 0.0
    net.config = net.config.replace(predict_torque=True)
    return net
