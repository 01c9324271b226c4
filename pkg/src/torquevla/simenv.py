"""Latched-insertion benchmark: success is only decidable through torque feedback.

A plug held by the gripper must be pressed into a socket whose latch needs a
hidden force ``resistance`` to seat. Each press is decided on the step the
contact force first reaches the latch engagement force (the lower end of the
resistance range): below ``resistance`` the plug springs back (failed
attempt), at or above it the latch seats. Pushing harder within the same press
cannot seat it, and any force beyond ``resistance + jam_margin`` jams the
latch (episode failure). The latch only reacts to a plug within
``capture_radius`` of the socket axis; pressing anywhere else just loads the
face plate. The socket pose is visible through a noisy context vector; the
resistance is not. ``depth_jitter`` optionally hides a small offset of the
socket face along the approach axis as well (off by default).

Timing is organised in 25-step cycles: an approach cycle, then one press
attempt per cycle (descend from a hover pose, preload, press, hold, retract to
the hover pose). Every cycle traces the same joint path up to the press depth,
so the pose tells a policy where it is within a cycle but not how many
attempts came before; only the torque history reveals how hard the previous
press was.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arm import ArmModel, default_arm, geometric_jacobian, kinematics, quasi_static_terms
from .validation import ConfigurationError, TerminalStateError, check_vector

HOME_Q = (0.2, 0.3, 0.1, 1.3, 0.1, 0.8, 0.04)


@dataclass(frozen=True)
class TaskSpec:
    socket_position: tuple = (0.42, 0.06, -0.40)
    socket_jitter: float = 0.02
    approach_axis: tuple = (0.0, 0.0, -1.0)
    resistance_range: tuple = (12.0, 30.0)
    contact_stiffness: float = 600.0
    capture_radius: float = 0.015
    depth_jitter: float = 0.0  # hidden offset of the socket face along the approach axis
    force_cap: float = 80.0
    jam_margin: float = 8.0
    sensor_noise_sigma: float = 0.05
    context_noise_sigma: float = 0.001
    n_distractors: int = 8
    max_steps: int = 100
    control_dt: float = 0.1
    action_limit: float = 0.1
    # scripted expert
    first_press_force: float = 16.5
    force_increment: float = 7.0
    preload_force: float = 6.0
    clearance: float = 0.01
    hover: float = 0.03
    cycle_steps: int = 25
    hold_steps: int = 4
    retract_steps: int = 4
    home_q: tuple = HOME_Q

    def __post_init__(self):
        lo, hi = self.resistance_range
        if not 0 < lo <= hi:
            raise ConfigurationError("resistance range must satisfy 0 < min <= max")
        if self.contact_stiffness <= 0:
            raise ConfigurationError("contact stiffness must be positive")
        if self.capture_radius <= 0:
            raise ConfigurationError("capture radius must be positive")
        spread = self.depth_jitter * self.contact_stiffness
        if not 0 <= spread < self.preload_force or self.preload_force + spread >= lo:
            raise ConfigurationError("depth jitter must keep the preload in contact and below the range")
        axis = np.asarray(self.approach_axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ConfigurationError("approach axis must be a unit vector")
        if not 0 <= self.preload_force < lo:
            raise ConfigurationError("preload force must lie below the resistance range")
        if self.force_increment > self.jam_margin:
            raise ConfigurationError("force increment must not exceed the jam margin")
        if self.descent_steps < 1:
            raise ConfigurationError("press schedule does not fit in one cycle")
        if not 0 < self.clearance < self.hover:
            raise ConfigurationError("need 0 < clearance < hover")

    @property
    def descent_steps(self) -> int:
        return self.cycle_steps - 2 - self.hold_steps - self.retract_steps

    @property
    def context_dim(self) -> int:
        return 6 + self.n_distractors

    def press_levels(self) -> np.ndarray:
        lo, hi = self.resistance_range
        n = int(np.ceil((hi - self.first_press_force) / self.force_increment)) + 1
        return self.first_press_force + self.force_increment * np.arange(max(n, 1))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigurationError(f"unknown task keys {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class Observation:
    context: np.ndarray
    q: np.ndarray
    tau: np.ndarray


@dataclass
class EnvState:
    q: np.ndarray
    qdot: np.ndarray
    rng: np.random.Generator
    resistance: float
    socket: np.ndarray
    distractors: np.ndarray
    face_offset: float = 0.0  # hidden, along the approach axis
    t: int = 0
    seated: bool = False
    jammed: bool = False
    done: bool = False
    attempt_count: int = 0
    in_contact: bool = False
    engaged: bool = False
    force: float = 0.0
    spike: list = field(default_factory=list)
    # last emitted external wrench and noise draw, for bit-exact replay
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def success(self) -> bool:
        return self.seated


def episode_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def reset(spec: TaskSpec, model: ArmModel, rng: np.random.Generator, resistance: Optional[float] = None):
    """Sample an episode; returns (state, first observation)."""
    lo, hi = spec.resistance_range
    r = float(rng.uniform(lo, hi))
    if resistance is not None:
        r = float(resistance)
    socket = np.asarray(spec.socket_position) + rng.uniform(-spec.socket_jitter, spec.socket_jitter, 3)
    distractors = rng.normal(size=spec.n_distractors)
    offset = float(rng.uniform(-spec.depth_jitter, spec.depth_jitter)) if spec.depth_jitter > 0 else 0.0
    q = np.asarray(spec.home_q, dtype=float)
    if q.shape[0] != model.n:
        raise ConfigurationError("home configuration does not match the arm")
    state = EnvState(q=q.copy(), qdot=np.zeros(model.n), rng=rng, resistance=r, socket=socket, distractors=distractors,
        face_offset=offset,
    )
    return state, _observe(state, spec, model)


def socket_face(state: EnvState, spec: TaskSpec) -> np.ndarray:
    """True centre of the socket face (the context only shows ``state.socket``)."""
    return state.socket + state.face_offset * np.asarray(spec.approach_axis)


def _contact_force(state: EnvState, spec: TaskSpec, tcp: np.ndarray) -> float:
    axis = np.asarray(spec.approach_axis)
    penetration = float((tcp - socket_face(state, spec)) @ axis)
    return min(spec.contact_stiffness * max(penetration, 0.0), spec.force_cap)


def _observe(state: EnvState, spec: TaskSpec, model: ArmModel) -> Observation:
    k, J, G = quasi_static_terms(model, state.q)
    force = _contact_force(state, spec, k.tcp.position) if not state.seated else state.force
    extra = state.spike[0] if state.spike else 0.0
    axis = np.asarray(spec.approach_axis)
    w = np.zeros(6)
    w[:3] = -(force + extra) * axis
    state.wrench = w
    ext = J.T @ w
    ext[-1] = 0.0
    noise = state.rng.normal(0.0, spec.sensor_noise_sigma, model.n)
    state.noise = noise
    tau = G + ext + noise
    ctx = np.concatenate([state.socket, axis, state.distractors])
    ctx = ctx + state.rng.normal(0.0, spec.context_noise_sigma, ctx.shape[0])
    return Observation(context=ctx, q=state.q.copy(), tau=tau)


def env_step(state: EnvState, spec: TaskSpec, model: ArmModel, action) -> tuple:
    """Apply a joint-position delta and return (state, observation).

    The state is updated in place. ``state.done`` is set when the episode
    ends: one step after seating, on a jam, or at ``max_steps``.
    """
    if state.done:
        raise TerminalStateError("episode has terminated")
    action = check_vector(action, model.n, "action")
    if not np.isfinite(action).all():
        raise ConfigurationError("action contains non-finite values")
    delta = np.clip(action, -spec.action_limit, spec.action_limit)
    state.t += 1
    if state.seated:
        # post-seat step: the plug is latched, the arm no longer moves
        state.spike = state.spike[1:]
        state.qdot = np.zeros(model.n)
        state.done = True
        return state, _observe(state, spec, model)

    state.q = state.q + delta
    state.qdot = delta / spec.control_dt
    tcp = kinematics(model, state.q).tcp.position
    force = _contact_force(state, spec, tcp)
    touching = force > 0.0
    if touching and not state.in_contact:
        state.attempt_count += 1
    state.in_contact = touching
    state.force = force
    off = tcp - state.socket
    axis = np.asarray(spec.approach_axis)
    aligned = np.linalg.norm(off - (off @ axis) * axis) <= spec.capture_radius
    engaging = aligned and not state.engaged and force >= spec.resistance_range[0]
    state.engaged = touching and (state.engaged or engaging)
    if aligned and force >= state.resistance + spec.jam_margin:
        state.jammed = True
        state.done = True
    elif engaging and force >= state.resistance:
        state.seated = True
        state.spike = [force * (1.0 - i / 3.0) for i in range(3)]
    obs = _observe(state, spec, model)
    if state.t >= spec.max_steps:
        state.done = True
    return state, obs


# --- scripted expert --------------------------------------------------------

def solve_position_ik(model: ArmModel, q0, target, iters=50, tol=1e-12) -> np.ndarray:
    """Newton iterations on TCP position with minimum-norm joint updates."""
    q = np.array(q0, dtype=float)
    for _ in range(iters):
        k = kinematics(model, q)
        err = target - k.tcp.position
        if err @ err < tol * tol:
            break
        Jv = geometric_jacobian(model, q).matrix[:3, :-1]
        q[:-1] += np.linalg.lstsq(Jv, err, rcond=None)[0]
    return q


class ScriptedExpert:
    """Approach, then press with escalating force until the latch seats.

    The expert sees privileged simulator state: the true socket face and
    whether the last press seated. It approaches and preloads against the
    nominal socket from the context, so the preload force varies with the
    hidden face offset, and presses against the true face. A failed press is
    followed by a retract and a press ``force_increment`` harder.
    ``retry=False`` disables the escalation (the same force is reused on
    every attempt).
    """

    def __init__(self, spec: TaskSpec, model: ArmModel, state: EnvState, retry: bool = True):
        self.spec, self.model, self.retry = spec, model, retry
        axis = np.asarray(spec.approach_axis)
        home = np.asarray(spec.home_q, dtype=float)
        tcp_home = kinematics(model, home).tcp.position
        hover = state.socket - spec.hover * axis
        pre = state.socket - spec.clearance * axis
        self.approach, self.descent = [], []
        q = home
        n = spec.cycle_steps
        for i in range(1, n + 1):
            q = solve_position_ik(model, q, tcp_home + (hover - tcp_home) * i / n)
            self.approach.append(q)
        self.q_hover = q
        n = spec.descent_steps
        for i in range(1, n + 1):
            q = solve_position_ik(model, q, hover + (pre - hover) * i / n)
            self.descent.append(q)
        self.q_pre = q
        self.q_preload = solve_position_ik(
            model, q, state.socket + spec.preload_force / spec.contact_stiffness * axis
        )
        self._press = {}
        self.face = socket_face(state, spec)

    def press_q(self, level: int) -> np.ndarray:
        if level not in self._press:
            force = self.spec.first_press_force + (self.spec.force_increment * level if self.retry else 0.0)
            depth = force / self.spec.contact_stiffness
            axis = np.asarray(self.spec.approach_axis)
            self._press[level] = solve_position_ik(self.model, self.q_preload, self.face + depth * axis)
        return self._press[level]

    def target(self, t: int) -> np.ndarray:
        s = self.spec
        if t < s.cycle_steps:
            return self.approach[t]
        attempt, phase = divmod(t - s.cycle_steps, s.cycle_steps)
        d = s.descent_steps
        if phase < d:
            return self.descent[phase]
        if phase == d:
            return self.q_preload
        if phase < d + 2 + s.hold_steps:
            return self.press_q(attempt)
        if phase < d + 2 + s.hold_steps + s.retract_steps:
            frac = (phase - (d + 1 + s.hold_steps)) / s.retract_steps
            press = self.press_q(attempt)
            return press + frac * (self.q_hover - press)
        return self.q_hover

    def __call__(self, state: EnvState) -> np.ndarray:
        if state.seated:
            return np.zeros(self.model.n)
        return self.target(state.t) - state.q


def scripted_expert(state: EnvState, spec: TaskSpec, model: ArmModel, privileged_resistance=None, _cache={}):
    """Functional form of :class:`ScriptedExpert` keyed on the episode's socket."""
    key = (id(spec), id(model), tuple(state.socket), state.face_offset)
    if key not in _cache:
        _cache.clear()
        _cache[key] = ScriptedExpert(spec, model, state)
    return _cache[key](state)


# --- episodes and datasets --------------------------------------------------

@dataclass
class Episode:
    context: np.ndarray  # (T, d_ctx)
    q: np.ndarray  # (T, n)
    tau: np.ndarray  # (T, n)
    actions: np.ndarray  # (T, n)
    success: bool
    seed: int
    resistance: float
    attempts: int
    wrench: Optional[np.ndarray] = None  # (T, 6) external wrench behind each torque frame
    noise: Optional[np.ndarray] = None  # (T, n) sensor noise draws

    def __len__(self):
        return self.q.shape[0]

    @property
    def observations(self):
        return [Observation(c, q, t) for c, q, t in zip(self.context, self.q, self.tau)]


def rollout_expert(spec: TaskSpec, model: ArmModel, rng, resistance=None, retry=True) -> Episode:
    state, obs = reset(spec, model, rng, resistance)
    expert = ScriptedExpert(spec, model, state, retry=retry)
    rows = {k: [] for k in ("context", "q", "tau", "actions", "wrench", "noise")}
    while not state.done:
        a = np.clip(expert(state), -spec.action_limit, spec.action_limit)
        rows["context"].append(obs.context)
        rows["q"].append(obs.q)
        rows["tau"].append(obs.tau)
        rows["wrench"].append(state.wrench.copy())
        rows["noise"].append(state.noise.copy())
        rows["actions"].append(a)
        state, obs = env_step(state, spec, model, a)
    arr = {k: np.array(v) for k, v in rows.items()}
    return Episode(
        context=arr["context"], q=arr["q"], tau=arr["tau"], actions=arr["actions"],
        success=state.seated, seed=-1, resistance=state.resistance, attempts=state.attempt_count,
        wrench=arr["wrench"], noise=arr["noise"],
    )


def sample_torque_history(episode_or_tau, t: int, K: int = 10, window_seconds: float = 2.0, dt: float = 0.1):
    """K frames spread uniformly over [t - window, t], clamped at frame 0.

    Accepts an :class:`Episode` or a (T, n) torque array.
    """
    if K < 1:
        raise ConfigurationError("history length K must be >= 1")
    if t < 0:
        raise ConfigurationError("time index must be non-negative")
    tau = episode_or_tau.tau if isinstance(episode_or_tau, Episode) else np.asarray(episode_or_tau)
    return tau[history_indices(t, K, window_seconds, dt)]


def history_indices(t, K=10, window_seconds=2.0, dt=0.1) -> np.ndarray:
    if K == 1:
        return np.array([t])
    span = window_seconds / dt
    idx = np.rint(np.linspace(t - span, t, K)).astype(int)
    return np.maximum(idx, 0)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X, floor=1e-6):
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), floor))

    def __call__(self, X):
        return (np.asarray(X) - self.mean) / self.std

    def inverse(self, X):
        return np.asarray(X) * self.std + self.mean


@dataclass
class Dataset:
    spec: TaskSpec
    episodes: list
    seed: int
    normalization: dict = field(default_factory=dict)
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    arm_name: str = "default7"

    def fit_normalization(self):
        train = [self.episodes[i] for i in self.train_idx]
        self.normalization = {
            key: Normalizer.fit(np.concatenate([getattr(ep, key) for ep in train]))
            for key in ("context", "q", "tau", "actions")
        }
        return self

    @property
    def train(self):
        return [self.episodes[i] for i in self.train_idx]

    @property
    def validation(self):
        return [self.episodes[i] for i in self.val_idx]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(_manifest_core(self).encode())
        for ep in self.episodes:
            h.update(_episode_bytes(ep))
        return h.hexdigest()


def split_indices(n, val_fraction=0.1):
    n_val = int(np.floor(n * val_fraction))
    n_train = n - n_val
    return np.arange(n_train), np.arange(n_train, n)


def generate_dataset(spec: TaskSpec, model: ArmModel, n_episodes: int, seed: int, val_fraction=0.1) -> Dataset:
    if n_episodes < 1:
        raise ConfigurationError("n_episodes must be >= 1")
    episodes = []
    for i in range(n_episodes):
        ep = rollout_expert(spec, model, episode_rng(seed, i))
        ep.seed = i
        episodes.append(ep)
    train, val = split_indices(n_episodes, val_fraction)
    ds = Dataset(spec, episodes, seed, train_idx=train, val_idx=val, arm_name=model.name)
    return ds.fit_normalization()


# --- persistence ------------------------------------------------------------

EPISODE_MAGIC = b"TQEP"
EPISODE_VERSION = 1
_EP_ARRAYS = ("context", "q", "tau", "actions", "wrench", "noise")

LAYOUT_DOC = (
    "episode files: magic 'TQEP', u32 version, u32 n_scalars, n_scalars x (u32 name_len, name, f64 value), "
    "u32 n_arrays, n_arrays x (u32 name_len, name, u32 rows, u32 cols, rows*cols f64); all little-endian"
)


def _episode_bytes(ep: Episode) -> bytes:
    buf = io.BytesIO()
    buf.write(EPISODE_MAGIC)
    buf.write(struct.pack("<I", EPISODE_VERSION))
    scalars = {"success": float(ep.success), "seed": float(ep.seed), "resistance": ep.resistance, "attempts": float(ep.attempts)}
    buf.write(struct.pack("<I", len(scalars)))
    for name, val in scalars.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb + struct.pack("<d", val))
    arrays = [(n, getattr(ep, n)) for n in _EP_ARRAYS if getattr(ep, n) is not None]
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb + struct.pack("<II", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _episode_from_bytes(blob: bytes) -> Episode:
    from .validation import FormatVersionError

    if blob[:4] != EPISODE_MAGIC:
        raise FormatVersionError("bad episode magic")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != EPISODE_VERSION:
        raise FormatVersionError(f"episode format version {version} unsupported")

    def name_at(p):
        (ln,) = struct.unpack_from("<I", blob, p)
        return blob[p + 4 : p + 4 + ln].decode(), p + 4 + ln

    (ns,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    scalars = {}
    for _ in range(ns):
        name, pos = name_at(pos)
        (scalars[name],) = struct.unpack_from("<d", blob, pos)
        pos += 8
    (na,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(na):
        name, pos = name_at(pos)
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        n = rows * cols
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += 8 * n
    return Episode(
        success=bool(scalars["success"]), seed=int(scalars["seed"]), resistance=scalars["resistance"],
        attempts=int(scalars["attempts"]), **{k: arrays.get(k) for k in _EP_ARRAYS},
    )


def _fmt(arr) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(arr))


def _manifest_core(ds: Dataset) -> str:
    lines = [
        "format=torquevla-dataset",
        f"version={EPISODE_VERSION}",
        f"layout={LAYOUT_DOC}",
        f"arm={ds.arm_name}",
        f"seed={ds.seed}",
        f"n_episodes={len(ds.episodes)}",
        f"spec={json.dumps(ds.spec.to_dict(), sort_keys=True)}",
        f"train_idx={','.join(str(int(i)) for i in ds.train_idx)}",
        f"val_idx={','.join(str(int(i)) for i in ds.val_idx)}",
    ]
    for key in sorted(ds.normalization):
        norm = ds.normalization[key]
        lines.append(f"norm.{key}.mean={_fmt(norm.mean)}")
        lines.append(f"norm.{key}.std={_fmt(norm.std)}")
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, directory) -> str:
    """Write manifest + one record file per episode; returns the content hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = ds.content_hash()
    for i, ep in enumerate(ds.episodes):
        (directory / f"episode_{i:05d}.bin").write_bytes(_episode_bytes(ep))
    (directory / "manifest.txt").write_text(_manifest_core(ds) + f"hash={digest}\n")
    return digest


def _parse_manifest(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ConfigurationError(f"manifest line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _ints(text):
    return np.array([int(v) for v in text.split(",") if v], dtype=int)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = _parse_manifest((directory / "manifest.txt").read_text())
    if meta.get("format") != "torquevla-dataset":
        raise ConfigurationError("not a dataset manifest")
    spec = TaskSpec.from_dict(json.loads(meta["spec"]))
    n = int(meta["n_episodes"])
    episodes = [_episode_from_bytes((directory / f"episode_{i:05d}.bin").read_bytes()) for i in range(n)]
    ds = Dataset(spec, episodes, int(meta["seed"]), train_idx=_ints(meta["train_idx"]), val_idx=_ints(meta["val_idx"]), arm_name=meta["arm"])
    for key in ("context", "q", "tau", "actions"):
        mean = np.array([float(v) for v in meta[f"norm.{key}.mean"].split(",")])
        std = np.array([float(v) for v in meta[f"norm.{key}.std"].split(",")])
        ds.normalization[key] = Normalizer(mean, std)
    return ds


def dataset_hash(directory) -> str:
    meta = _parse_manifest((Path(directory) / "manifest.txt").read_text())
    return meta["hash"]


def export_jsonl(ds: Dataset, path) -> None:
    """One JSON object per frame, for inspection."""
    with open(path, "w") as fh:
        for i, ep in enumerate(ds.episodes):
            for t in range(len(ep)):
                fh.write(json.dumps({
                    "episode": i, "t": t, "success": ep.success,
                    "context": ep.context[t].tolist(), "q": ep.q[t].tolist(),
                    "tau": ep.tau[t].tolist(), "action": ep.actions[t].tolist(),
                }) + "\n")
