"""Training frames drawn from expert episodes, normalized per dimension."""
from __future__ import annotations

import numpy as np

from ..simenv import Normalizer, history_indices
from .config import PolicyConfig


def chunk_offsets(actions, H) -> np.ndarray:
    """(T, H, n) cumulative joint offsets of every H-step chunk, zero motion after the end."""
    a = np.vstack([actions, np.zeros((H, actions.shape[1]))])
    idx = np.arange(len(actions))[:, None] + np.arange(H)[None, :]
    return np.cumsum(a[idx], axis=1)


def offset_normalizer(episodes, H) -> Normalizer:
    """Per-joint statistics of chunk offsets over all frames and horizon steps."""
    X = np.concatenate([chunk_offsets(ep.actions, H).reshape(-1, ep.actions.shape[1]) for ep in episodes])
    return Normalizer.fit(X)


class ChunkSampler:
    """Indexes every (episode, t) frame and assembles normalized batches.

    The action chunk is ``actions[t : t+H]`` padded with zero motion after the
    episode ends (as running offsets when ``config.action_chunk`` is
    "offset"); the torque chunk is ``tau[t+1 : t+H+1]`` padded with the last
    frame.
    """

    def __init__(self, episodes, normalization: dict, config: PolicyConfig, frame_stride: int = 1):
        if not episodes:
            raise ValueError("no episodes to sample from")
        self.config = c = config
        nz = normalization
        H = c.horizon_H
        ctx, q, tau, act, tau_pad, starts, lengths = [], [], [], [], [], [], []
        offset = 0
        for ep in episodes:
            T_ = len(ep)
            ctx.append(nz["context"](ep.context))
            q.append(nz["q"](ep.q))
            tau.append(nz["tau"](ep.tau))
            if c.action_chunk == "offset":
                # row t holds the whole chunk starting at t; stored flat as T*H rows
                act.append(nz["offsets"](chunk_offsets(ep.actions, H)))
            else:
                a = np.vstack([ep.actions, np.zeros((H, ep.actions.shape[1]))])
                act.append(nz["actions"](a))
            tp = np.vstack([ep.tau[1:], np.repeat(ep.tau[-1:], H + 1, axis=0)])
            tau_pad.append(nz["tau"](tp))
            starts.append(offset)
            lengths.append(T_)
            offset += T_
        self.context = np.concatenate(ctx)
        self.q = np.concatenate(q)
        self.tau = np.concatenate(tau)
        self.lengths = np.array(lengths)
        self.starts = np.array(starts)
        self.frame_episode = np.repeat(np.arange(len(episodes)), self.lengths)
        self.frame_t = np.concatenate([np.arange(n) for n in lengths])
        # flat padded stores for chunk gathering
        pad_len = self.lengths + H
        self._pad_starts = np.concatenate([[0], np.cumsum(pad_len)[:-1]])
        if c.action_chunk == "offset":
            self._act_chunks = np.concatenate(act)
        else:
            self._act_flat = np.concatenate([a[: n + H] for a, n in zip(act, lengths)])
        self._tau_flat = np.concatenate([tp[: n + H] for tp, n in zip(tau_pad, lengths)])
        # frames eligible for training: every ``frame_stride``-th step of each episode
        self.eligible = np.flatnonzero(self.frame_t % frame_stride == 0)

    def __len__(self):
        return len(self.eligible)

    def histories(self, frames) -> np.ndarray:
        c = self.config
        K = c.history_K
        out = np.empty((len(frames), K, self.tau.shape[1]))
        for i, f in enumerate(frames):
            ep = self.frame_episode[f]
            idx = history_indices(int(self.frame_t[f]), K, c.history_window_s, c.control_dt)
            out[i] = self.tau[self.starts[ep] + idx]
        return out

    def batch(self, frames) -> dict:
        c = self.config
        frames = np.asarray(frames)
        ep = self.frame_episode[frames]
        base = self._pad_starts[ep] + self.frame_t[frames]
        idx = base[:, None] + np.arange(c.horizon_H)[None, :]
        out = {
            "context": self.context[frames],
            "q": self.q[frames],
            "actions": self._act_chunks[frames] if c.action_chunk == "offset" else self._act_flat[idx],
            "frames": frames,
        }
        if c.uses_torque:
            out["history"] = self.histories(frames)
        if c.predict_torque:
            out["torque"] = self._tau_flat[idx]
        return out

    def sample(self, rng, batch_size) -> dict:
        return self.batch(self.eligible[rng.integers(0, len(self.eligible), batch_size)])
