"""Estimator wrapper: training, sampling, persistence."""
from __future__ import annotations

import json
import logging
import time

import numpy as np
from sklearn.base import BaseEstimator

from ..nn import AdamW, backward, checkpoint, cosine_lr
from ..simenv import Normalizer, history_indices
from ..validation import DatasetHashMismatch, check_is_fitted
from .config import PolicyConfig, TrainConfig
from .data import ChunkSampler, offset_normalizer
from .flow import flow_loss, sample_chunks
from .network import FlowNetwork, expand_output_head

log = logging.getLogger(__name__)

_ARCH_PARAMS = (
    "torque_mode", "history_K", "history_window_s", "horizon_H", "predict_torque", "beta",
    "state_pad", "n_ctx_tokens", "w_enc", "w_dec", "enc_depth", "dec_depth", "n_heads",
    "flow_steps", "aggregator", "execute_steps", "action_chunk",
)
_TRAIN_PARAMS = ("steps", "batch_size", "lr", "weight_decay", "warmup", "min_lr_ratio", "frame_stride")


class FlowMatchingPolicy(BaseEstimator):
    """Chunked flow-matching policy with configurable torque integration.

    ``fit`` takes a :class:`~torquevla.simenv.Dataset` and trains on its
    training split. ``plan`` maps raw observations to raw action chunks.
    """

    def __init__(
        self,
        torque_mode="none",
        history_K=10,
        history_window_s=2.0,
        horizon_H=50,
        predict_torque=False,
        beta=None,
        state_pad=9,
        n_ctx_tokens=8,
        w_enc=64,
        w_dec=32,
        enc_depth=2,
        dec_depth=2,
        n_heads=2,
        flow_steps=10,
        aggregator="mlp",
        execute_steps=25,
        action_chunk="offset",
        steps=5000,
        batch_size=32,
        lr=1e-3,
        weight_decay=1e-4,
        warmup=100,
        min_lr_ratio=0.05,
        frame_stride=1,
        random_state=0,
    ):
        self.torque_mode = torque_mode
        self.history_K = history_K
        self.history_window_s = history_window_s
        self.horizon_H = horizon_H
        self.predict_torque = predict_torque
        self.beta = beta
        self.state_pad = state_pad
        self.n_ctx_tokens = n_ctx_tokens
        self.w_enc = w_enc
        self.w_dec = w_dec
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.n_heads = n_heads
        self.flow_steps = flow_steps
        self.aggregator = aggregator
        self.execute_steps = execute_steps
        self.action_chunk = action_chunk
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.min_lr_ratio = min_lr_ratio
        self.frame_stride = frame_stride
        self.random_state = random_state

    @classmethod
    def from_configs(cls, policy: PolicyConfig, train: TrainConfig | None = None):
        train = train or TrainConfig()
        kw = {k: getattr(policy, k) for k in _ARCH_PARAMS}
        kw.update({k: getattr(train, k) for k in _TRAIN_PARAMS})
        return cls(random_state=train.seed, **kw)

    def policy_config(self, d_a=7, d_tau=7, d_ctx=14, control_dt=0.1) -> PolicyConfig:
        kw = {k: getattr(self, k) for k in _ARCH_PARAMS}
        return PolicyConfig(d_a=d_a, d_tau=d_tau, d_ctx=d_ctx, control_dt=control_dt, **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_PARAMS}, seed=int(self.random_state))

    # -- setup ---------------------------------------------------------------

    def initialize(self, dataset):
        """Build an untrained network sized and normalized for ``dataset``."""
        ep = dataset.episodes[0]
        cfg = self.policy_config(
            d_a=ep.actions.shape[1], d_tau=ep.tau.shape[1], d_ctx=ep.context.shape[1],
            control_dt=dataset.spec.control_dt,
        )
        if not dataset.normalization:
            dataset.fit_normalization()
        self.config_ = cfg
        self.normalization_ = dict(dataset.normalization)
        if cfg.action_chunk == "offset":
            self.normalization_["offsets"] = offset_normalizer(dataset.train, cfg.horizon_H)
        self.dataset_hash_ = dataset.content_hash()
        self.network_ = FlowNetwork(cfg, np.random.default_rng(np.random.SeedSequence([int(self.random_state), 1])))
        self.history_ = []
        return self

    def fit(self, dataset, callback=None):
        self.initialize(dataset)
        self.train_steps(dataset, self.steps, callback=callback)
        return self

    def train_steps(self, dataset, steps, callback=None, optimizer=None):
        """Run ``steps`` optimizer steps on the training split; returns the optimizer."""
        check_is_fitted(self, "network_")
        if dataset.content_hash() != self.dataset_hash_:
            raise DatasetHashMismatch("dataset differs from the one the policy was initialized on")
        sampler = ChunkSampler(dataset.train, self.normalization_, self.config_, self.frame_stride)
        rng = np.random.default_rng(np.random.SeedSequence([int(self.random_state), 2, len(self.history_)]))
        opt = optimizer or AdamW(self.network_.named_parameters(), self.lr, self.weight_decay)
        t0 = time.perf_counter()
        for step in range(steps):
            lr = cosine_lr(step, steps, self.lr, min(self.warmup, steps // 10), self.min_lr_ratio)
            batch = sampler.sample(rng, self.batch_size)
            loss, parts = flow_loss(self.network_, batch, rng)
            backward(loss)
            opt.step(lr)
            self.history_.append((parts.total, parts.action, parts.torque if parts.torque is not None else np.nan))
            if callback is not None:
                callback(step, parts)
            if step % 500 == 0:
                log.debug("step %d loss %.4f (%.1fs)", step, parts.total, time.perf_counter() - t0)
        self.optimizer_ = opt
        return opt

    def expand_output_head(self, rng=None):
        """Add the torque block to a trained action-only policy."""
        check_is_fitted(self, "network_")
        rng = rng or np.random.default_rng(np.random.SeedSequence([int(self.random_state), 3]))
        expand_output_head(self.network_, rng, self.config_.d_tau, self.config_.head_init_scale)
        self.config_ = self.network_.config
        self.predict_torque = True
        return self

    # -- inference -------------------------------------------------------------

    def normalized_history(self, tau_log, t):
        """(K, d_tau) normalized history from a raw (t+1, d_tau) torque log."""
        c = self.config_
        idx = history_indices(t, c.history_K, c.history_window_s, c.control_dt)
        return self.normalization_["tau"](np.asarray(tau_log)[idx])

    def plan(self, context, q, history, rng, perturb=None, return_torque=False):
        """Raw action chunks (B, H, d_a) for a batch of raw observations.

        ``history`` is the raw (B, K, d_tau) torque history, oldest first.
        """
        check_is_fitted(self, "network_")
        c, nz = self.config_, self.normalization_
        context = np.atleast_2d(np.asarray(context, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        hist = None
        if c.uses_torque:
            hist = nz["tau"](np.asarray(history, dtype=float).reshape(q.shape[0], -1, c.d_tau))
        z = sample_chunks(self.network_, nz["context"](context), nz["q"](q), hist, rng, perturb)
        if c.action_chunk == "offset":
            offsets = nz["offsets"].inverse(z[..., : c.d_a])
            actions = np.diff(offsets, axis=1, prepend=0.0)
        else:
            actions = nz["actions"].inverse(z[..., : c.d_a])
        if return_torque:
            torque = nz["tau"].inverse(z[..., c.d_a :]) if c.predict_torque else None
            return actions, torque
        return actions

    def predict(self, context, q, history=None, random_state=0):
        """Action chunks for a batch of observations (deterministic given ``random_state``)."""
        return self.plan(context, q, history, np.random.default_rng(random_state))

    # -- persistence -----------------------------------------------------------

    def save(self, path, include_optimizer=False):
        check_is_fitted(self, "network_")
        meta = {
            "estimator": self.get_params(),
            "config": self.config_.to_dict(),
            "normalization": {k: [v.mean.tolist(), v.std.tolist()] for k, v in self.normalization_.items()},
            "dataset_hash": self.dataset_hash_,
            "train_steps_done": len(self.history_),
        }
        opt = getattr(self, "optimizer_", None) if include_optimizer else None
        checkpoint.save(path, self.network_.state_dict(), meta, opt.state if opt else None)

    @classmethod
    def load(cls, path):
        params, meta, _ = checkpoint.load(path)
        est = cls(**meta["estimator"])
        cfg = PolicyConfig(**meta["config"])
        est.config_ = cfg
        est.normalization_ = {
            k: Normalizer(np.array(m), np.array(s)) for k, (m, s) in meta["normalization"].items()
        }
        est.dataset_hash_ = meta["dataset_hash"]
        est.network_ = FlowNetwork(cfg, np.random.default_rng(0))
        est.network_.load_state_dict(params)
        est.history_ = []
        return est

    def describe(self) -> str:
        return json.dumps(self.config_.to_dict(), sort_keys=True)
