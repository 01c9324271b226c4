"""Policy configuration and the flat key=value config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..validation import ConfigurationError

TORQUE_MODES = (
    "none",
    "enc_single",
    "enc_hist_frames",
    "enc_hist_agg",
    "dec_pre",
    "dec_post_single",
    "dec_post_hist_frames",
    "dec_post_hist_agg",
)
AGGREGATORS = ("mlp", "rnn", "attention")
ACTION_CHUNKS = ("offset", "delta")

BETA_OBJ_ONLY = 1.0
BETA_OBS_OBJ = 0.1


@dataclass(frozen=True)
class PolicyConfig:
    torque_mode: str = "none"
    history_K: int = 10
    history_window_s: float = 2.0
    horizon_H: int = 50
    predict_torque: bool = False
    beta: float | None = None  # None picks the default for the torque mode
    d_a: int = 7
    d_tau: int = 7
    d_ctx: int = 14
    state_pad: int = 9
    n_ctx_tokens: int = 8
    w_enc: int = 64
    w_dec: int = 32
    enc_depth: int = 2
    dec_depth: int = 2
    n_heads: int = 2
    flow_steps: int = 10
    aggregator: str = "mlp"
    execute_steps: int = 25
    control_dt: float = 0.1
    head_init_scale: float = 0.01
    # "offset": the chunk is predicted as joint offsets from the planning-time state and
    # differenced into per-step deltas for execution; "delta": per-step deltas directly
    action_chunk: str = "offset"

    def __post_init__(self):
        if self.torque_mode not in TORQUE_MODES:
            raise ConfigurationError(f"torque_mode must be one of {TORQUE_MODES}, got {self.torque_mode!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}")
        if self.action_chunk not in ACTION_CHUNKS:
            raise ConfigurationError(f"action_chunk must be one of {ACTION_CHUNKS}")
        if self.torque_mode == "dec_pre" and self.state_pad < self.d_tau:
            raise ConfigurationError("dec_pre needs state_pad >= d_tau")
        if self.beta is not None and self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.flow_steps < 1 or self.history_K < 1 or self.horizon_H < 1:
            raise ConfigurationError("flow_steps, history_K and horizon_H must be >= 1")
        if not 1 <= self.execute_steps <= self.horizon_H:
            raise ConfigurationError("execute_steps must lie in [1, horizon_H]")
        if self.w_enc % self.n_heads or self.w_dec % self.n_heads:
            raise ConfigurationError("widths must be divisible by n_heads")

    @property
    def site(self) -> str:
        if self.torque_mode == "none":
            return "none"
        return "encoder" if self.torque_mode.startswith("enc") else "decoder"

    @property
    def uses_torque(self) -> bool:
        return self.torque_mode != "none"

    @property
    def n_torque_tokens(self) -> int:
        if self.torque_mode in ("none", "dec_pre"):
            return 0
        return self.history_K if self.torque_mode.endswith("hist_frames") else 1

    @property
    def history_frames(self) -> int:
        """Torque frames the policy reads per decision."""
        if self.torque_mode == "none":
            return 0
        return self.history_K if "hist" in self.torque_mode else 1

    @property
    def d_z(self) -> int:
        return self.d_a + (self.d_tau if self.predict_torque else 0)

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return BETA_OBS_OBJ if self.uses_torque else BETA_OBJ_ONLY

    def replace(self, **kw) -> "PolicyConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup: int = 100
    min_lr_ratio: float = 0.05
    frame_stride: int = 1  # train on every n-th frame; match execute_steps to train on decision points only
    seed: int = 0
    log_every: int = 500

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(field: dataclasses.Field, text: str, lineno: int):
    typ = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    try:
        if "bool" in typ:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if "None" in typ and text.lower() in ("none", ""):
            return None
        if "int" in typ and "float" not in typ:
            return int(text)
        if "float" in typ:
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"line {lineno}: cannot parse {field.name}={text!r} as {typ}") from None


RAW_SECTIONS = {
    "data": {"episodes": int, "seed": int, "val_fraction": float},
    "eval": {"episodes": int, "seed": int},
}


def parse_config(text: str) -> dict:
    """Parse flat ``key=value`` lines into config objects.

    Bare keys are policy fields; ``train.``, ``task.``, ``data.`` and
    ``eval.`` prefixes select the other sections, and ``grid.<policy field>``
    takes a comma-separated list of values to sweep. Unknown keys are
    rejected with their line number. Returns a dict with ``policy``,
    ``train``, ``task`` objects and ``data``, ``eval``, ``grid`` dicts.
    """
    from ..simenv import TaskSpec

    classes = {"policy": PolicyConfig, "train": TrainConfig, "task": TaskSpec}
    fields = {name: {f.name: f for f in dataclasses.fields(cls)} for name, cls in classes.items()}
    values = {name: {} for name in classes}
    raw = {name: {} for name in RAW_SECTIONS}
    grid = {}
    for lineno, line_raw in enumerate(text.splitlines(), 1):
        line = line_raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        section = section or "policy"
        if section in RAW_SECTIONS:
            kinds = RAW_SECTIONS[section]
            if name not in kinds:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            try:
                raw[section][name] = kinds[name](val)
            except ValueError:
                raise ConfigurationError(f"line {lineno}: cannot parse {key}={val!r}") from None
            continue
        if section == "grid":
            if name not in fields["policy"]:
                raise ConfigurationError(f"line {lineno}: unknown grid key {key!r}")
            grid[name] = [_coerce(fields["policy"][name], v.strip(), lineno) for v in val.split(",") if v.strip()]
            if not grid[name]:
                raise ConfigurationError(f"line {lineno}: empty grid for {name}")
            continue
        if section not in fields or name not in fields[section]:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        f = fields[section][name]
        if "tuple" in str(f.type):
            try:
                values[section][name] = tuple(float(v) for v in val.split(","))
            except ValueError:
                raise ConfigurationError(f"line {lineno}: bad vector {val!r}") from None
        else:
            values[section][name] = _coerce(f, val, lineno)
    out = {}
    for name, cls in classes.items():
        try:
            out[name] = cls(**values[name])
        except ConfigurationError as exc:
            raise ConfigurationError(f"{name} section: {exc}") from None
    out.update(raw)
    out["grid"] = grid
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def format_config(policy: PolicyConfig, train: TrainConfig | None = None, task=None) -> str:
    lines = []
    for obj, prefix in ((policy, ""), (train, "train."), (task, "task.")):
        if obj is None:
            continue
        for k, v in dataclasses.asdict(obj).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{prefix}{k}={v}")
    return "\n".join(lines) + "\n"
