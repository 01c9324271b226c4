"""Closed-loop evaluation with receding-horizon chunk execution."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..arm import ArmModel, default_arm
from ..simenv import ScriptedExpert, TaskSpec, env_step, episode_rng, history_indices, reset

EVAL_STREAM = 7919  # keeps evaluation episodes disjoint from dataset episodes


@dataclass
class EvalResult:
    success_rate: float
    mean_attempts: float
    mean_steps: float
    jam_rate: float
    n_episodes: int
    seed: int
    successes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class ExpertPlanner:
    """The scripted expert exposed through the planner interface."""

    def __init__(self, spec: TaskSpec, model: ArmModel, horizon=50):
        self.spec, self.model, self.horizon = spec, model, horizon
        self._experts = {}

    def bind(self, states):
        self._experts = {id(s): ScriptedExpert(self.spec, self.model, s) for s in states}

    def plan_states(self, states):
        out = np.zeros((len(states), self.horizon, self.model.n))
        for i, s in enumerate(states):
            ex = self._experts[id(s)]
            prev = s.q
            for h in range(self.horizon):
                tgt = ex.target(s.t + h)
                out[i, h] = tgt - prev
                prev = tgt
        return out


def closed_loop_eval(
    planner,
    spec: TaskSpec | None = None,
    model: ArmModel | None = None,
    n_episodes: int = 100,
    seed: int = 0,
    execute_steps: int | None = None,
    perturb=None,
    policy_seed: int | None = None,
) -> EvalResult:
    """Roll out ``n_episodes`` in lockstep, re-planning every ``execute_steps``.

    ``planner`` is a fitted :class:`FlowMatchingPolicy` or an
    :class:`ExpertPlanner`. Episodes are seeded from ``(seed, EVAL_STREAM, i)``.
    """
    spec = spec or TaskSpec()
    model = model or default_arm()
    is_expert = isinstance(planner, ExpertPlanner)
    cfg = None if is_expert else planner.config_
    E = execute_steps or (cfg.execute_steps if cfg is not None else spec.cycle_steps)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), EVAL_STREAM, 1 if policy_seed is None else 2 + policy_seed]))
    states, ctx, taus = [], [], []
    for i in range(n_episodes):
        s, obs = reset(spec, model, np.random.default_rng(np.random.SeedSequence([int(seed), EVAL_STREAM, i])))
        states.append(s)
        ctx.append(obs.context)
        taus.append([obs.tau])
    if is_expert:
        planner.bind(states)
    chunks = [None] * n_episodes
    while True:
        active = [i for i, s in enumerate(states) if not s.done]
        if not active:
            break
        t = states[active[0]].t
        if t % E == 0:
            if is_expert:
                plan = planner.plan_states([states[i] for i in active])
            else:
                hist = None
                if cfg.uses_torque:
                    idx = history_indices(t, cfg.history_K, cfg.history_window_s, cfg.control_dt)
                    hist = np.stack([np.asarray(taus[i])[idx] for i in active])
                plan = planner.plan(
                    np.stack([ctx[i] for i in active]), np.stack([states[i].q for i in active]), hist, rng, perturb
                )
            for j, i in enumerate(active):
                chunks[i] = plan[j]
        for i in active:
            s = states[i]
            _, obs = env_step(s, spec, model, chunks[i][s.t % E])
            ctx[i] = obs.context
            taus[i].append(obs.tau)
    succ = [bool(s.seated) for s in states]
    return EvalResult(
        success_rate=float(np.mean(succ)),
        mean_attempts=float(np.mean([s.attempt_count for s in states])),
        mean_steps=float(np.mean([s.t for s in states])),
        jam_rate=float(np.mean([s.jammed for s in states])),
        n_episodes=n_episodes,
        seed=int(seed),
        successes=succ,
    )
