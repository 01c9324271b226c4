"""Dependence, sensitivity and torque-prediction instruments for trained policies."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator

from .arm import default_arm
from .policy.evaluation import closed_loop_eval
from .policy.network import Perturbation
from .simenv import TaskSpec, history_indices
from .validation import check_array, check_is_fitted

MODALITIES = ("action", "angle", "torque", "context")


class DegenerateKernelError(ValueError):
    """A Gram matrix centred to zero (constant samples)."""


def median_bandwidth(X) -> float:
    d = pdist(X)
    d = d[d > 0]
    if d.size == 0:
        raise DegenerateKernelError("all samples identical; bandwidth undefined")
    return float(np.median(d))


def rbf_gram(X, bandwidth=None):
    X = check_array(X, 2)
    bw = median_bandwidth(X) if bandwidth is None else float(bandwidth)
    D2 = squareform(pdist(X, "sqeuclidean"))
    return np.exp(-D2 / (2.0 * bw * bw)), bw


def _centre(K):
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def hsic(K, L) -> float:
    """Biased HSIC from two Gram matrices."""
    m = K.shape[0]
    return float(np.sum(_centre(K) * _centre(L))) / (m - 1) ** 2


def hsic_normalized(X, Y, bandwidth_x=None, bandwidth_y=None) -> float:
    """HSIC(X, Y) / sqrt(HSIC(X, X) HSIC(Y, Y)) with RBF kernels."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y need the same number of samples")
    if X.shape[0] < 8:
        raise ValueError("need at least 8 samples")
    K, _ = rbf_gram(X, bandwidth_x)
    L, _ = rbf_gram(Y, bandwidth_y)
    Kc, Lc = _centre(K), _centre(L)
    kk, ll = np.sum(Kc * Kc), np.sum(Lc * Lc)
    if kk <= 1e-300 or ll <= 1e-300:
        raise DegenerateKernelError("centred Gram matrix is zero")
    return float(np.clip(np.sum(Kc * Lc) / np.sqrt(kk * ll), 0.0, 1.0))


class HSICDependence(BaseEstimator):
    """Estimator form: ``fit(X)`` fixes the X bandwidth, ``score(X, Y)`` returns normalized HSIC."""

    def __init__(self, bandwidth=None):
        self.bandwidth = bandwidth

    def fit(self, X, y=None):
        X = check_array(np.asarray(X).reshape(len(X), -1), 2)
        self.bandwidth_ = median_bandwidth(X) if self.bandwidth is None else float(self.bandwidth)
        return self

    def score(self, X, Y):
        check_is_fitted(self, "bandwidth_")
        return hsic_normalized(X, Y, self.bandwidth_, None)


# --- token dependence ---------------------------------------------------------

@dataclass
class DependenceMatrix:
    labels: list
    matrix: np.ndarray
    n_samples: int
    bandwidths: dict
    omitted: list = field(default_factory=list)

    def value(self, a, b) -> float:
        return float(self.matrix[self.labels.index(a), self.labels.index(b)])

    def to_dict(self) -> dict:
        return {
            "labels": self.labels, "matrix": self.matrix.tolist(), "n_samples": self.n_samples,
            "bandwidths": self.bandwidths, "omitted": self.omitted,
        }


def _frame_batch(policy, episodes, frames):
    """Normalized network inputs for a list of (episode, t) pairs."""
    c, nz = policy.config_, policy.normalization_
    ctx = np.stack([episodes[e].context[t] for e, t in frames])
    q = np.stack([episodes[e].q[t] for e, t in frames])
    hist = None
    if c.uses_torque:
        hist = np.stack([
            episodes[e].tau[history_indices(t, c.history_K, c.history_window_s, c.control_dt)] for e, t in frames
        ])
        hist = nz["tau"](hist)
    return nz["context"](ctx), nz["q"](q), hist


def sample_frames(episodes, n, rng, stride=1):
    """``n`` distinct (episode, t) pairs, restricted to t divisible by ``stride``."""
    lengths = np.array([(len(ep) + stride - 1) // stride for ep in episodes])
    flat = rng.choice(lengths.sum(), size=min(n, lengths.sum()), replace=False)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    e = np.searchsorted(starts, flat, side="right") - 1
    return [(int(a), int(b) * stride) for a, b in zip(e, flat - starts[e])]


def modality_hidden_states(policy, episodes, frames, layer_index=0, rng=None, alpha=0.5, cap=32):
    """One hidden vector per modality per frame, taken after block ``layer_index``.

    Decoder modalities (action, angle, torque) come from the decoder; context
    tokens from the encoder at the same depth (its last block if shallower). Multi-token modalities
    contribute one randomly chosen token per frame.
    """
    from .nn import no_grad

    rng = rng or np.random.default_rng(0)
    c = policy.config_
    net = policy.network_
    ctx, q, hist = _frame_batch(policy, episodes, frames)
    B = ctx.shape[0]
    z = rng.standard_normal((B, c.horizon_H, c.d_z))
    taps = {}
    with no_grad():
        net(ctx, q, hist, z, np.full(B, alpha), taps=taps)
    dec = taps[f"dec{layer_index}"]
    enc = taps[f"enc{min(layer_index, c.enc_depth - 1)}"]
    n_tq = c.n_torque_tokens if c.site == "decoder" else 0
    rows = np.arange(B)

    def pick(n):
        pool = capped_indices(n, cap)
        return pool[rng.integers(0, len(pool), B)]

    out = {
        "action": dec[rows, n_tq + 1 + pick(c.horizon_H)],
        "angle": dec[:, n_tq],
        "context": enc[rows, pick(c.n_ctx_tokens)],
    }
    if n_tq:
        out["torque"] = dec[rows, pick(n_tq)]
    return out


def capped_indices(n, cap):
    """At most ``cap`` evenly strided token indices out of ``n``."""
    if n <= cap:
        return np.arange(n)
    return np.unique(np.rint(np.linspace(0, n - 1, cap)).astype(int))


def token_dependence_matrix(
    policy, dataset, layer_index=0, cap=32, n_frames=256, seed=0, permute=None
) -> DependenceMatrix:
    """Pairwise normalized HSIC between modality hidden states.

    Samples are frames drawn from the validation split (training split if it
    is empty); each frame contributes one token per modality, chosen from at
    most ``cap`` strided tokens of that modality. ``permute`` names a
    modality whose frames are shuffled, a control that should destroy its
    dependence on the others.
    """
    check_is_fitted(policy, "network_")
    rng = np.random.default_rng(seed)
    episodes = dataset.validation or dataset.train
    frames = sample_frames(episodes, n_frames, rng)
    states = modality_hidden_states(policy, episodes, frames, layer_index, rng, cap=cap)
    if permute is not None:
        states[permute] = states[permute][rng.permutation(len(frames))]
    labels = [m for m in MODALITIES if m in states]
    omitted = [m for m in MODALITIES if m not in states]
    n = len(labels)
    M = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = hsic_normalized(states[labels[i]], states[labels[j]])
    bws = {m: median_bandwidth(states[m]) for m in labels}
    return DependenceMatrix(labels, M, len(frames), bws, omitted)


# --- sensitivity ----------------------------------------------------------------

@dataclass
class SensitivityResult:
    site: str
    kind: str
    sigma: float
    clean: float
    perturbed: float
    delta: float
    seed: int

    def to_dict(self):
        return asdict(self)


def sensitivity_experiment(
    policy, spec=None, model=None, site="decoder", kind="noise", sigma=0.1, n_episodes=100, seed=0,
    perturb_seed=0, clean=None,
) -> SensitivityResult:
    """Success-rate drop (clean minus perturbed) for one perturbation site."""
    if site not in ("encoder", "decoder"):
        raise ValueError("site must be encoder or decoder")
    if kind not in ("noise", "extra_token"):
        raise ValueError("kind must be noise or extra_token")
    spec = spec or TaskSpec()
    model = model or default_arm()
    if clean is None:
        clean = closed_loop_eval(policy, spec, model, n_episodes, seed).success_rate
    if kind == "noise" and sigma == 0.0:
        perturbed = clean
    else:
        pert = Perturbation(site, kind, sigma, np.random.default_rng(np.random.SeedSequence([perturb_seed, 11])))
        perturbed = closed_loop_eval(policy, spec, model, n_episodes, seed, perturb=pert).success_rate
    return SensitivityResult(site, kind, sigma, clean, perturbed, clean - perturbed, seed)


# --- torque prediction ------------------------------------------------------------

@dataclass
class TorqueReport:
    mse: np.ndarray  # per joint
    correlation: np.ndarray  # per joint, nan where the target is constant
    predicted: np.ndarray  # (frames, H, d_tau)
    target: np.ndarray
    frames: list
    excluded: list

    def summary(self, joints=None) -> dict:
        return {
            "mse": self.mse.tolist(),
            "correlation": [None if np.isnan(c) else float(c) for c in self.correlation],
            "excluded_from_correlation": self.excluded,
            "n_frames": len(self.frames),
        }


def future_torque(episode, t, H):
    tau = episode.tau
    idx = np.minimum(np.arange(t + 1, t + H + 1), len(tau) - 1)
    return tau[idx]


def torque_prediction_report(policy, episodes, n_frames=64, seed=0, exclude=None, stride=None) -> TorqueReport:
    """Predicted vs. true future torque over the chunk horizon for sampled frames.

    Frames are drawn every ``stride`` steps (default: the policy's training
    ``frame_stride``, i.e. the frames it plans from). Joints listed in
    ``exclude`` (default: the last, gripper, joint) get an MSE but no
    correlation.
    """
    check_is_fitted(policy, "network_")
    c = policy.config_
    if not c.predict_torque:
        raise ValueError("policy does not predict torque")
    rng = np.random.default_rng(seed)
    stride = getattr(policy, "frame_stride", 1) if stride is None else stride
    frames = sample_frames(episodes, n_frames, rng, stride)
    ctx = np.stack([episodes[e].context[t] for e, t in frames])
    q = np.stack([episodes[e].q[t] for e, t in frames])
    hist = np.stack([
        episodes[e].tau[history_indices(t, c.history_K, c.history_window_s, c.control_dt)] for e, t in frames
    ])
    _, pred = policy.plan(ctx, q, hist, np.random.default_rng(np.random.SeedSequence([seed, 5])), return_torque=True)
    target = np.stack([future_torque(episodes[e], t, c.horizon_H) for e, t in frames])
    exclude = [c.d_tau - 1] if exclude is None else list(exclude)
    mse = ((pred - target) ** 2).reshape(-1, c.d_tau).mean(axis=0)
    corr = np.full(c.d_tau, np.nan)
    P, Tt = pred.reshape(-1, c.d_tau), target.reshape(-1, c.d_tau)
    for j in range(c.d_tau):
        if j in exclude or Tt[:, j].std() == 0 or P[:, j].std() == 0:
            continue
        corr[j] = np.corrcoef(P[:, j], Tt[:, j])[0, 1]
    return TorqueReport(mse, corr, pred, target, frames, exclude)


def contact_bearing_joints(episodes, model=None, ratio=0.2) -> list:
    """Joints whose mean external torque magnitude during contact is at least
    ``ratio`` of the strongest joint's."""
    from .arm import geometric_jacobian

    model = model or default_arm()
    acc = np.zeros(model.n)
    count = 0
    for ep in episodes:
        for t in np.flatnonzero(np.abs(ep.wrench[:, :3]).sum(axis=1) > 0):
            J = geometric_jacobian(model, ep.q[t]).matrix
            acc += np.abs(J.T @ ep.wrench[t])
            count += 1
    if count == 0:
        return []
    mean = acc / count
    return [int(j) for j in np.flatnonzero(mean >= ratio * mean.max())]


# --- report files ---------------------------------------------------------------

def write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def write_torque_report(report: TorqueReport, out_dir, max_frames=8):
    out = Path(out_dir)
    rows = []
    for f, (e, t) in enumerate(report.frames[:max_frames]):
        for h in range(report.target.shape[1]):
            for j in range(report.target.shape[2]):
                rows.append([f, e, t, h, j, float(report.predicted[f, h, j]), float(report.target[f, h, j])])
    write_table(out / "torque_curves.tsv", ["frame", "episode", "t", "h", "joint", "predicted", "target"], rows)
    stats = [[j, float(report.mse[j]), "" if np.isnan(report.correlation[j]) else float(report.correlation[j])]
             for j in range(len(report.mse))]
    write_table(out / "torque_stats.tsv", ["joint", "mse", "pearson"], stats)
    (out / "torque_summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))


def write_dependence(dm: DependenceMatrix, out_dir):
    out = Path(out_dir)
    rows = [[a] + [float(v) for v in dm.matrix[i]] for i, a in enumerate(dm.labels)]
    write_table(out / "hsic_matrix.tsv", ["modality"] + dm.labels, rows)
    (out / "hsic_summary.json").write_text(json.dumps(dm.to_dict(), indent=2, sort_keys=True))
