"""Command-line entry point: ``torquevla <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import analysis
from ..arm import get_arm
from ..policy import FlowMatchingPolicy, PolicyConfig, closed_loop_eval, format_config, load_config
from ..simenv import TaskSpec, dataset_hash, generate_dataset, load_dataset, save_dataset
from ..validation import ConfigurationError, DatasetHashMismatch, FormatVersionError
from . import experiments as ex
from .manifest import RunManifest, find_manifests, resolve

ERRORS = {
    ConfigurationError: (2, "config"),
    DatasetHashMismatch: (3, "dataset-hash"),
    FormatVersionError: (4, "format"),
    FileNotFoundError: (5, "missing"),
}


def _out_dir(path) -> Path:
    p = resolve(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _check_hash(policy, data_dir):
    h = dataset_hash(resolve(data_dir))
    if h != policy.dataset_hash_:
        raise DatasetHashMismatch(
            f"checkpoint was trained on dataset {policy.dataset_hash_[:12]}, got {h[:12]}"
        )
    return h


def _task(args) -> TaskSpec:
    if getattr(args, "spec", None):
        return load_config(resolve(args.spec))["task"]
    return TaskSpec()


def cmd_gen_data(args):
    spec = _task(args)
    model = get_arm(args.arm)
    out = _out_dir(args.out)
    ds = generate_dataset(spec, model, args.episodes, args.seed)
    h = save_dataset(ds, out)
    RunManifest("gen-data", {"task": spec.to_dict(), "episodes": args.episodes}, h, model.name,
                {"data": args.seed}, [str(out)], {"expert_success": float(np.mean([e.success for e in ds.episodes]))}
                ).write(out / "runs" / "gen-data")
    print(f"dataset {h} ({args.episodes} episodes) -> {out}")


def cmd_train(args):
    cfg = load_config(resolve(args.config))
    policy_cfg, train_cfg = cfg["policy"], cfg["train"]
    if args.steps is not None:
        train_cfg = type(train_cfg)(**{**train_cfg.to_dict(), "steps": args.steps})
    ds = load_dataset(resolve(args.data))
    out = _out_dir(args.out)
    est = ex.train_policy(ds, policy_cfg, train_cfg, train_cfg.seed)
    ckpt = out / "policy.ckpt"
    est.save(ckpt)
    (out / "config.txt").write_text(format_config(policy_cfg, train_cfg))
    losses = np.array(est.history_)
    res = {"final_loss": float(losses[-min(100, len(losses)):, 0].mean())}
    RunManifest("train", {"policy": policy_cfg.to_dict(), "train": train_cfg.to_dict()}, est.dataset_hash_,
                ds.arm_name, {"train": train_cfg.seed}, [str(ckpt), str(out / "config.txt")], res).write(out)
    print(f"trained {policy_cfg.torque_mode}: loss {res['final_loss']:.4f} -> {ckpt}")


def _load_policy(args):
    est = FlowMatchingPolicy.load(resolve(args.ckpt))
    if getattr(args, "data", None):
        _check_hash(est, args.data)
    return est


def cmd_eval(args):
    est = _load_policy(args)
    spec = _task(args)
    out = _out_dir(args.out or Path(args.ckpt).parent / f"eval_seed{args.seed}")
    r = closed_loop_eval(est, spec, get_arm(args.arm), args.episodes, args.seed)
    ex.write_json(out / "eval.json", r.to_dict())
    RunManifest("eval", {"ckpt": str(resolve(args.ckpt)), "policy": est.config_.to_dict(), "episodes": args.episodes},
                est.dataset_hash_, args.arm, {"eval": args.seed}, [str(out / "eval.json")],
                {"success_rate": r.success_rate, "mean_attempts": r.mean_attempts, "variant": est.config_.torque_mode}
                ).write(out)
    print(f"success {r.success_rate:.3f}  attempts {r.mean_attempts:.2f}  jams {r.jam_rate:.3f}")


def _ablate_one(cfg, seed, v, out, n_eps, eval_eps, ds=None):
    """Train and evaluate one (seed, variant) cell; reuses a finished run directory."""
    name = ex.variant_name(v)
    run_dir = out / f"{name.replace(',', '+')}" / f"seed{seed}"
    if (run_dir / "run.json").exists():
        return _result_from_manifest(run_dir)
    ds = ds or ex.make_dataset(cfg["task"], n_eps, seed)
    pcfg = cfg["policy"].replace(**v)
    est, r = ex.run_variant(ds, pcfg, cfg["train"], seed, eval_eps, spec=cfg["task"])
    r.variant = name
    run_dir.mkdir(parents=True, exist_ok=True)
    est.save(run_dir / "policy.ckpt")
    RunManifest("ablate", {"policy": pcfg.to_dict(), "train": cfg["train"].to_dict(), "task": cfg["task"].to_dict()},
                est.dataset_hash_, ds.arm_name, {"data": seed, "train": seed, "eval": seed},
                [str(run_dir / "policy.ckpt")], r.to_dict()).write(run_dir)
    return r


def cmd_ablate(args):
    cfg = load_config(resolve(args.grid))
    out = _out_dir(args.out)
    n_eps = cfg["data"].get("episodes", 200)
    eval_eps = cfg["eval"].get("episodes", 100)
    jobs = [(seed, v) for seed in range(args.seeds) for v in ex.expand_grid(cfg["grid"])]
    if args.jobs > 1:
        # every cell is seeded on its own, so scheduling order cannot change a number
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_ablate_one, cfg, seed, v, out, n_eps, eval_eps) for seed, v in jobs]
            results = [f.result() for f in futures]
    else:
        results, datasets = [], {}
        for seed, v in jobs:
            if seed not in datasets:
                datasets[seed] = ex.make_dataset(cfg["task"], n_eps, seed)
            results.append(_ablate_one(cfg, seed, v, out, n_eps, eval_eps, datasets[seed]))
    for r in results:
        print(f"{r.variant:28s} seed {r.seed}: success {r.success_rate:.3f}", flush=True)
    summary = ex.summarize(results)
    ex.write_json(out / "summary.json", summary)
    (out / "table.md").write_text(ex.render_table(summary))
    print(ex.render_table(summary))


def _result_from_manifest(run_dir):
    m = RunManifest.read(run_dir)
    r = m.results
    return ex.RunResult(r["variant"], r["seed"], r["success_rate"], r["mean_attempts"], r["jam_rate"], r.get("extras", {}))


def cmd_hsic(args):
    est = _load_policy(args)
    ds = load_dataset(resolve(args.data))
    dm = analysis.token_dependence_matrix(est, ds, layer_index=args.layer, seed=args.seed)
    out = _out_dir(args.out or Path(args.ckpt).parent / "hsic")
    analysis.write_dependence(dm, out)
    RunManifest("hsic", {"ckpt": str(resolve(args.ckpt)), "layer": args.layer}, est.dataset_hash_, ds.arm_name,
                {"frames": args.seed}, [str(out / "hsic_matrix.tsv"), str(out / "hsic_summary.json")],
                dm.to_dict()).write(out)
    print("\t".join(["", *dm.labels]))
    for i, a in enumerate(dm.labels):
        print("\t".join([a, *(f"{v:.3f}" for v in dm.matrix[i])]))


def cmd_sensitivity(args):
    est = _load_policy(args)
    r = analysis.sensitivity_experiment(est, _task(args), get_arm(args.arm), args.site, args.kind, args.sigma,
                                        args.episodes, args.seed, perturb_seed=args.seed)
    out = _out_dir(args.out or Path(args.ckpt).parent / f"sensitivity_{args.site}_{args.kind}")
    ex.write_json(out / "sensitivity.json", r.to_dict())
    RunManifest("sensitivity", {"ckpt": str(resolve(args.ckpt)), "site": args.site, "kind": args.kind,
                                "sigma": args.sigma}, est.dataset_hash_, args.arm, {"eval": args.seed},
                [str(out / "sensitivity.json")], r.to_dict()).write(out)
    print(f"clean {r.clean:.3f}  perturbed {r.perturbed:.3f}  delta {r.delta:+.3f}")


def cmd_torque_report(args):
    est = _load_policy(args)
    ds = load_dataset(resolve(args.data))
    rep = analysis.torque_prediction_report(est, ds.validation or ds.train, n_frames=args.frames, seed=args.seed)
    out = _out_dir(args.out or Path(args.ckpt).parent / "torque_report")
    analysis.write_torque_report(rep, out)
    RunManifest("torque-report", {"ckpt": str(resolve(args.ckpt)), "frames": args.frames}, est.dataset_hash_,
                ds.arm_name, {"frames": args.seed},
                [str(out / n) for n in ("torque_curves.tsv", "torque_stats.tsv", "torque_summary.json")],
                rep.summary()).write(out)
    for j, (m, c) in enumerate(zip(rep.mse, rep.correlation)):
        print(f"joint {j}: mse {m:.4f}  r {'n/a' if np.isnan(c) else f'{c:.3f}'}")


def cmd_report(args):
    runs = resolve(args.runs)
    results = []
    for path in find_manifests(runs):
        m = RunManifest.read(path)
        r = m.results
        if m.command in ("ablate",) and "success_rate" in r:
            results.append(ex.RunResult(r["variant"], r["seed"], r["success_rate"], r["mean_attempts"], r["jam_rate"]))
        elif m.command == "eval":
            results.append(ex.RunResult(r.get("variant", "eval"), m.seeds.get("eval", 0), r["success_rate"],
                                        r["mean_attempts"], float("nan")))
    if not results:
        raise FileNotFoundError(f"no evaluated runs under {runs}")
    summary = ex.summarize(results)
    table = ex.render_table(summary)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    print(table)


def build_parser():
    p = argparse.ArgumentParser(prog="torquevla", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--arm", default="default7")
        return sp

    s = add("gen-data", cmd_gen_data, help="generate an expert dataset")
    s.add_argument("--spec")
    s.add_argument("--episodes", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("train", cmd_train, help="train a policy")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)

    s = add("eval", cmd_eval, help="closed-loop evaluation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", help="dataset the checkpoint must have been trained on")
    s.add_argument("--spec")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = add("ablate", cmd_ablate, help="train and evaluate a variant grid over seeds")
    s.add_argument("--grid", required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--jobs", type=int, default=1, help="parallel runs")
    s.add_argument("--out", required=True)

    s = add("hsic", cmd_hsic, help="token dependence matrix")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = add("sensitivity", cmd_sensitivity, help="perturbation sensitivity")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--site", choices=("encoder", "decoder"), required=True)
    s.add_argument("--kind", choices=("noise", "extra_token"), required=True)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--spec")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = add("torque-report", cmd_torque_report, help="future-torque prediction accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = add("report", cmd_report, help="consolidated success table from run manifests")
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.fn(args)
    except tuple(ERRORS) as exc:
        code, kind = next(v for k, v in ERRORS.items() if isinstance(exc, k))
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
