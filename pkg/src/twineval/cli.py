"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 2 validation/input error (machine-readable JSON on
stderr), 3 a result carried a not-converged flag (outputs are still
written unless --strict).  Every command takes --seed where randomness is
involved and derives all downstream streams from it through the
seed-splitting scheme in ``twineval.rng``, so identical inputs and seeds
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as tio
from .bisim import compute_metric
from .estimation import estimate_mdp, sample_trajectories, sample_sweep
from .exceptions import TwinevalError, ValidationError
from .mdp import (FiniteMdp, QLearningConfig, policy_evaluation, q_learning,
                  suboptimality, value_iteration)
from .prefilter import (TrainerSpec, cost_report, fit_bound, run_experiment,
                        select)
from .rng import split_seed
from .wireless import build_real_env, generate_candidates


class _NotConverged(Exception):
    """Internal signal: a not-converged flag surfaced under --strict."""


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _emit_warning(message: str) -> None:
    sys.stderr.write(json.dumps({"warning": message}) + "\n")


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _cmd_gen(args) -> int:
    spec = tio.load_envspec(args.spec) if args.spec else tio.RunConfig().make_env_spec()
    env = build_real_env(spec)
    candidates = generate_candidates(env, spec, args.pool,
                                     seed=split_seed(args.seed, "pool"))
    os.makedirs(args.out, exist_ok=True)
    tio.save_envspec(os.path.join(args.out, "env_spec.json"), spec)
    tio.save_mdp(os.path.join(args.out, "real_env.json"), env)
    tio.save_pool(args.out, candidates, seed=args.seed)
    return 0


def _cmd_sample(args) -> int:
    env = tio.load_mdp(args.env)
    behavior = tio.load_policy(args.policy) if args.policy else "uniform"
    batch = sample_trajectories(env, behavior, args.steps,
                                args.episode_length, seed=args.seed)
    tio.save_trajectories(args.out, batch)
    return 0


def _cmd_estimate(args) -> int:
    batch = tio.load_trajectories(args.traj)
    mdp = estimate_mdp(batch, args.states, args.actions, args.gamma,
                       kappa=args.kappa)
    tio.save_mdp(args.out, mdp)
    return 0


def _cmd_bsm(args) -> int:
    real = tio.load_mdp(args.real)
    twin = tio.load_mdp(args.twin)
    metric = compute_metric(real, twin, tol=args.tol, max_iter=args.max_iter,
                            inner_solver=args.solver)
    if not metric.converged and args.strict:
        raise _NotConverged(f"metric residual {metric.residual:.3e} above tol")
    if args.out:
        tio.save_metric(args.out, metric)
    sys.stdout.write(json.dumps({
        "iterations": metric.iterations,
        "residual": metric.residual,
        "converged": metric.converged,
    }) + "\n")
    if not metric.converged:
        _emit_warning("metric did not converge within max_iter")
        return 3
    return 0


def _trainer_from_args(args) -> TrainerSpec:
    episodes: object = _parse_int_list(args.episodes)
    episodes = episodes[0] if len(episodes) == 1 else tuple(episodes)
    return TrainerSpec(kind=args.trainer, episodes=episodes,
                       horizon=args.horizon)


def _cmd_train(args) -> int:
    env = tio.load_mdp(args.env)
    if args.trainer == "exact":
        plan = value_iteration(env, tol=args.tol)
        if not plan.converged and args.strict:
            raise _NotConverged("value iteration did not converge")
        policy = plan.policy
        effort = plan.iterations
        converged = plan.converged
    else:
        spec = _trainer_from_args(args)
        config = QLearningConfig(episodes=spec.episodes_for(0),
                                 horizon=spec.horizon)
        result = q_learning(env, config, seed=split_seed(args.seed, "train", 0))
        policy = result.policy
        effort = config.episodes
        converged = True
    tio.save_policy(args.out, policy)
    train_value = float(np.mean(policy_evaluation(env, policy, tol=args.tol)))
    sys.stdout.write(json.dumps({"training_effort": effort,
                                 "train_value": train_value}) + "\n")
    if not converged:
        _emit_warning("training did not converge")
        return 3
    return 0


def _cmd_deploy(args) -> int:
    env = tio.load_mdp(args.env)
    policy = tio.load_policy(args.policy)
    rho = np.full(env.n_states, 1.0 / env.n_states)
    v = float(rho @ policy_evaluation(env, policy, tol=args.tol))
    gap = suboptimality(env, policy, rho, tol=args.tol)
    doc = {"deploy_value": v, "deploy_suboptimality": gap}
    if args.out:
        tio.atomic_write_text(args.out, json.dumps(doc, indent=1) + "\n")
    sys.stdout.write(json.dumps(doc) + "\n")
    return 0


def _cmd_experiment(args) -> int:
    config = tio.load_config(args.config)
    spec = config.make_env_spec()
    env = build_real_env(spec)
    candidates = generate_candidates(env, spec, config.pool,
                                     seed=split_seed(args.seed, "pool"))
    runs = run_experiment(env, candidates, trainer=config.make_trainer(),
                          tol=config.tol_plan, metric_tol=config.tol_metric,
                          inner_solver=config.solver, seed=args.seed)
    plan = value_iteration(env, tol=config.tol_plan * (1.0 - env.gamma))
    v_star_rho = float(np.mean(plan.values))
    os.makedirs(args.out, exist_ok=True)
    all_ids = [r.candidate_id for r in runs]
    selections: dict[str, list[int]] = {}
    for strategy in config.strategies:
        if strategy == "brute_force":
            selections[strategy] = list(all_ids)
        else:
            selections[strategy] = select(
                runs, strategy, config.ratio,
                seed=split_seed(args.seed, "selection"))
    tio.write_ledger(os.path.join(args.out, "ledger.csv"), runs, candidates,
                     selections)
    tio.save_runs(os.path.join(args.out, "runs.json"), runs, candidates,
                  v_star_rho, seed=args.seed)
    bars = []
    for strategy, subset in selections.items():
        report = cost_report(runs, subset, v_star_rho)
        tio.save_cost_report(
            os.path.join(args.out, f"cost_{strategy}.json"), report)
        tio.save_subset(
            os.path.join(args.out, f"selection_{strategy}.json"),
            strategy, 1.0 if strategy == "brute_force" else config.ratio,
            subset)
        bars.append({"strategy": strategy,
                     "ratio": 1.0 if strategy == "brute_force" else config.ratio,
                     "best_deploy_value": report.best_deploy_value,
                     "testing_cost": report.testing_cost,
                     "training_cost_reduction": report.training_cost_reduction})
    ledger_rows = tio.read_ledger(os.path.join(args.out, "ledger.csv"))
    tio.atomic_write_text(os.path.join(args.out, "plot_scatter.csv"),
                          tio.emit_plot_data(ledger_rows, "scatter"))
    tio.atomic_write_text(os.path.join(args.out, "plot_prefilter_bars.csv"),
                          tio.emit_plot_data(ledger_rows, "prefilter_bars",
                                             bars=bars))
    if config.save_candidates:
        tio.save_mdp(os.path.join(args.out, "real_env.json"), env)
        tio.save_pool(args.out, candidates, seed=args.seed)
    return 0


def _cmd_select(args) -> int:
    if args.runs:
        runs, _ = tio.load_runs(args.runs)
    else:
        if args.strategy == "reward":
            raise ValidationError(
                ["reward selection needs runs.json (in-twin values are "
                 "not part of the ledger CSV)"])
        rows = tio.read_ledger(args.ledger)
        from .prefilter import ExperimentRun
        runs = [ExperimentRun(candidate_id=row["candidate_id"],
                              bsm_scalar=row["bsm_scalar"],
                              train_suboptimality=row["train_subopt"],
                              deploy_suboptimality=row["deploy_subopt"],
                              deploy_value=row["deploy_value"],
                              train_value=0.0, training_effort=0)
                for row in rows]
    subset = select(runs, args.strategy, args.ratio,
                    seed=split_seed(args.seed, "selection"))
    tio.save_subset(args.out, args.strategy, args.ratio, subset)
    sys.stdout.write(json.dumps({"ids": subset}) + "\n")
    return 0


def _cmd_report(args) -> int:
    runs, doc = tio.load_runs(args.runs)
    if args.kind == "cost":
        subset = tio.load_subset(args.subset)
        report = cost_report(runs, subset, doc["v_star_rho"])
        tio.save_cost_report(args.out, report)
    elif args.kind == "scatter":
        rows = [{"bsm_scalar": r.bsm_scalar, "deploy_value": r.deploy_value}
                for r in runs]
        tio.atomic_write_text(args.out, tio.emit_plot_data(rows, "scatter"))
    else:  # prefilter_bars
        bars = []
        for strategy in ("evaluation", "reward", "random", "brute_force"):
            if strategy == "brute_force":
                subset = [r.candidate_id for r in runs]
                ratio = 1.0
            else:
                subset = select(runs, strategy, args.ratio,
                                seed=split_seed(args.seed, "selection"))
                ratio = args.ratio
            rep = cost_report(runs, subset, doc["v_star_rho"])
            bars.append({"strategy": strategy, "ratio": ratio,
                         "best_deploy_value": rep.best_deploy_value,
                         "testing_cost": rep.testing_cost,
                         "training_cost_reduction": rep.training_cost_reduction})
        tio.atomic_write_text(args.out,
                              tio.emit_plot_data([], "prefilter_bars",
                                                 bars=bars))
    return 0


def _cmd_fit_bound(args) -> int:
    runs, _ = tio.load_runs(args.runs)
    fit_ids = _parse_int_list(args.fit_ids) if args.fit_ids else None
    holdout_ids = _parse_int_list(args.holdout_ids) if args.holdout_ids else None
    fit = fit_bound(runs, fit_ids, holdout_ids)
    tio.save_bound(args.out, fit)
    sys.stdout.write(json.dumps({"alpha": fit.alpha, "beta": fit.beta,
                                 "holdout_violation_rate":
                                     fit.holdout_violation_rate}) + "\n")
    return 0


def _cmd_sweep(args) -> int:
    env = tio.load_mdp(args.env)
    sizes = _parse_int_list(args.sizes)
    seeds = _parse_int_list(args.seeds)
    result = sample_sweep(env, env, sizes, seeds, kappa=args.kappa,
                          episode_length=args.episode_length,
                          metric_tol=args.tol)
    lines = ["n_steps,median_scalar"]
    for n, med in result.curve:
        lines.append(f"{n},{med!r}")
    tio.atomic_write_text(args.out, "\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twineval",
        description="Evaluate digital-twin MDP fidelity and pre-filter "
                    "candidate twins before RL training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True, tol=1e-8, out_required=True, strict=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if tol is not None:
            p.add_argument("--tol", type=float, default=tol)
        p.add_argument("--out", required=out_required,
                       help="output file or directory")
        if strict:
            p.add_argument("--strict", action="store_true",
                           help="treat not-converged results as errors")

    p = sub.add_parser("gen", help="build the real env and candidate pool")
    p.add_argument("--spec", help="EnvSpec JSON (defaults when omitted)")
    p.add_argument("--pool", type=int, default=120)
    add_common(p, tol=None)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("sample", help="collect trajectories from an MDP file")
    p.add_argument("--env", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--episode-length", type=int, default=100)
    p.add_argument("--policy", help="behavior policy JSON (uniform if omitted)")
    add_common(p, tol=None)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("estimate", help="reconstruct an MDP from trajectories")
    p.add_argument("--traj", required=True)
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--kappa", type=float, default=0.0)
    add_common(p, seed=False, tol=None)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("bsm", help="pairwise metric between two MDP files")
    p.add_argument("real")
    p.add_argument("twin")
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--solver", choices=("exact", "sinkhorn"), default="exact")
    add_common(p, seed=False, tol=1e-6, out_required=False)
    p.set_defaults(func=_cmd_bsm)

    p = sub.add_parser("train", help="train a policy inside an MDP file")
    p.add_argument("--env", required=True)
    p.add_argument("--trainer", choices=("exact", "q_learning"),
                   default="exact")
    p.add_argument("--episodes", default="400")
    p.add_argument("--horizon", type=int, default=40)
    add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("deploy", help="evaluate a policy file in an MDP file")
    p.add_argument("--env", required=True)
    p.add_argument("--policy", required=True)
    add_common(p, seed=False, out_required=False)
    p.set_defaults(func=_cmd_deploy)

    p = sub.add_parser("experiment", help="full pre-filtering pipeline")
    p.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    add_common(p, tol=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("select", help="pick a candidate subset from runs")
    p.add_argument("--runs", help="runs.json from an experiment")
    p.add_argument("--ledger", help="ledger.csv (evaluation/random only)")
    p.add_argument("--strategy", required=True,
                   choices=("evaluation", "reward", "random"))
    p.add_argument("--ratio", type=float, default=0.05)
    add_common(p, tol=None)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("report", help="cost report or plot data from runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--kind", choices=("cost", "scatter", "prefilter_bars"),
                   default="cost")
    p.add_argument("--subset", help="subset JSON (for --kind cost)")
    p.add_argument("--ratio", type=float, default=0.05)
    add_common(p, tol=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("fit-bound", help="fit the additive performance bound")
    p.add_argument("--runs", required=True)
    p.add_argument("--fit-ids", help="comma-separated candidate ids")
    p.add_argument("--holdout-ids", help="comma-separated candidate ids")
    add_common(p, seed=False, tol=None)
    p.set_defaults(func=_cmd_fit_bound)

    p = sub.add_parser("sweep", help="mismatch versus sample size curve")
    p.add_argument("--env", required=True)
    p.add_argument("--sizes", required=True,
                   help="comma-separated, strictly increasing step counts")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--episode-length", type=int, default=100)
    add_common(p, seed=False, tol=1e-6)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NotConverged as exc:
        _emit_error("NotConverged", str(exc))
        return 3
    except (ValidationError,) as exc:
        _emit_error("ValidationError", str(exc))
        return 2
    except TwinevalError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 2
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
