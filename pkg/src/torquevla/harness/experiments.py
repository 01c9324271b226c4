"""Experiment orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..analysis import (
    contact_bearing_joints,
    sensitivity_experiment,
    token_dependence_matrix,
    torque_prediction_report,
)
from ..arm import default_arm
from ..policy import FlowMatchingPolicy, PolicyConfig, TrainConfig, closed_loop_eval
from ..simenv import TaskSpec, generate_dataset


@dataclass
class RunResult:
    variant: str
    seed: int
    success_rate: float
    mean_attempts: float
    jam_rate: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "variant": self.variant, "seed": self.seed, "success_rate": self.success_rate,
            "mean_attempts": self.mean_attempts, "jam_rate": self.jam_rate, "extras": self.extras,
        }


def variant_name(overrides: dict) -> str:
    if not overrides:
        return "default"
    parts = []
    for k, v in sorted(overrides.items()):
        parts.append(str(v) if k == "torque_mode" else f"{k}={v}")
    return ",".join(parts)


def expand_grid(grid: dict) -> list:
    """Cartesian product of ``{field: [values]}`` in sorted key order."""
    if not grid:
        return [{}]
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def make_dataset(spec: TaskSpec, n_episodes: int, seed: int, model=None):
    return generate_dataset(spec, model or default_arm(), n_episodes, seed)


def train_policy(dataset, policy_cfg: PolicyConfig, train_cfg: TrainConfig, seed: int) -> FlowMatchingPolicy:
    est = FlowMatchingPolicy.from_configs(policy_cfg, train_cfg)
    est.set_params(random_state=seed)
    return est.fit(dataset)


def run_variant(dataset, policy_cfg, train_cfg, seed, eval_episodes=100, eval_seed=None, spec=None, model=None):
    """Train one policy and evaluate it closed-loop; returns (policy, RunResult)."""
    spec = spec or dataset.spec
    model = model or default_arm()
    est = train_policy(dataset, policy_cfg, train_cfg, seed)
    res = closed_loop_eval(est, spec, model, eval_episodes, seed if eval_seed is None else eval_seed)
    name = variant_name({k: v for k, v in policy_cfg.to_dict().items() if v != getattr(PolicyConfig(), k)})
    return est, RunResult(name, seed, res.success_rate, res.mean_attempts, res.jam_rate)


def seed_majority(values_a, values_b, margin=0.0) -> tuple:
    """Number of seeds where a >= b + margin, and the total."""
    a, b = np.asarray(values_a), np.asarray(values_b)
    return int(np.sum(a >= b + margin - 1e-12)), len(a)


def summarize(results: list) -> dict:
    """variant -> {mean, std, n, per_seed} over RunResults."""
    table = {}
    for r in results:
        table.setdefault(r.variant, []).append((r.seed, r.success_rate))
    out = {}
    for k, rows in table.items():
        rows.sort()
        vals = np.array([v for _, v in rows])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals),
                  "per_seed": {int(s): float(v) for s, v in rows}}
    return out


def render_table(summary: dict, task="latched_insertion") -> str:
    """Methods x task table of mean success fractions."""
    lines = [f"| method | {task} | seeds |", "|---|---|---|"]
    for name in sorted(summary, key=lambda k: (-summary[k]["mean"], k)):
        s = summary[name]
        lines.append(f"| {name} | {s['mean']:.3f} ± {s['std']:.3f} | {s['n']} |")
    return "\n".join(lines) + "\n"


def run_analysis_suite(policy, dataset, seed, spec=None, model=None, eval_episodes=100, sensitivity=True,
                       hsic=True, torque=True, clean=None) -> dict:
    """Sensitivity, dependence and torque-report numbers for one trained policy."""
    spec = spec or dataset.spec
    model = model or default_arm()
    out = {}
    if sensitivity:
        for site in ("encoder", "decoder"):
            for kind in ("noise", "extra_token"):
                r = sensitivity_experiment(policy, spec, model, site, kind, 0.1, eval_episodes, seed,
                                           perturb_seed=seed, clean=clean)
                clean = r.clean
                out[f"sens_{site}_{kind}"] = r.to_dict()
    if hsic and policy.config_.site == "decoder" and policy.config_.n_torque_tokens:
        out["hsic"] = token_dependence_matrix(policy, dataset, seed=seed).to_dict()
    if torque and policy.config_.predict_torque:
        rep = torque_prediction_report(policy, dataset.validation or dataset.train, seed=seed)
        joints = contact_bearing_joints(dataset.train[:20], model)
        out["torque"] = dict(rep.summary(), contact_joints=joints)
    return out


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
