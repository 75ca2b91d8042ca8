"""Experiment engine: per-candidate train/evaluate/deploy, selection, costs.

The pipeline per candidate twin: train a policy inside the twin, measure
how suboptimal that policy is in the twin (training gap), deploy it in the
real environment and measure the gap there (deployment gap), and compute
the worst-case pairwise-metric scalar between the two MDPs.  Selection
strategies then pick a small subset to actually pay training/testing costs
for, and the bound fitter certifies the additive relation
deployment gap <= alpha * mismatch + beta * training gap empirically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .bisim import compute_metric, scalarize
from .exceptions import DegenerateFitError, EmptyPoolError
from .mdp import (FiniteMdp, Policy, QLearningConfig, _check_rho,
                  policy_evaluation, q_learning, suboptimality,
                  value_iteration)
from .rng import split_seed
from .wireless import CandidateDT

BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class TrainerSpec:
    """How to train inside each candidate twin.

    ``exact`` plans by value iteration (training gap ~ 0); ``q_learning``
    runs a tabular learner whose episode budget may cycle over a list so
    the pool exhibits a spread of training suboptimalities, which the
    bound fit needs.
    """

    kind: str = "exact"
    episodes: Union[int, tuple] = 400
    horizon: int = 40
    alpha0: float = 0.5
    alpha_decay: float = 1.0
    eps0: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.05

    def __post_init__(self):
        if self.kind not in ("exact", "q_learning"):
            raise ValueError(f"unknown trainer kind {self.kind!r}")

    def episodes_for(self, index: int) -> int:
        if isinstance(self.episodes, int):
            return self.episodes
        return int(self.episodes[index % len(self.episodes)])


@dataclass(frozen=True)
class ExperimentRun:
    """Per-candidate outcome record."""

    candidate_id: int
    bsm_scalar: float
    train_suboptimality: float
    deploy_suboptimality: float
    deploy_value: float
    train_value: float
    training_effort: int


@dataclass(frozen=True)
class CostReport:
    n_trained: int
    n_tested: int
    training_cost_reduction: float
    testing_cost: float
    testing_cost_reduction: float
    best_deploy_value: float


@dataclass(frozen=True)
class BoundFit:
    alpha: float
    beta: float
    fit_ids: tuple
    holdout_ids: tuple
    holdout_violation_rate: float


def pool_metric_scalars(real: FiniteMdp, candidates: Sequence[CandidateDT],
                        tol: float = 1e-6, max_iter: int = 1000,
                        inner_solver: str = "exact") -> dict[int, float]:
    """Worst-case metric scalar per candidate id."""
    out = {}
    for cand in candidates:
        metric = compute_metric(real, cand.mdp, tol=tol, max_iter=max_iter,
                                inner_solver=inner_solver)
        out[cand.id] = scalarize(metric, "worst_case").scalar_max
    return out


def run_experiment(real: FiniteMdp, candidates: Sequence[CandidateDT],
                   trainer: TrainerSpec = TrainerSpec(),
                   rho: Optional[np.ndarray] = None,
                   tol: float = 1e-8,
                   metric_tol: float = 1e-6,
                   inner_solver: str = "exact",
                   seed: int = 0,
                   bsm_scalars: Optional[dict[int, float]] = None
                   ) -> list[ExperimentRun]:
    """Train, evaluate and deploy every candidate; fully seeded.

    ``bsm_scalars`` lets callers reuse metric scalars computed earlier for
    the same (real, candidates) pair, since they do not depend on the
    trainer.
    """
    rho = _check_rho(real.n_states, rho)
    if bsm_scalars is None:
        bsm_scalars = pool_metric_scalars(real, candidates, tol=metric_tol,
                                          inner_solver=inner_solver)
    plan_real = value_iteration(real, tol=tol * (1.0 - real.gamma))
    v_star_rho = float(rho @ plan_real.values)
    runs = []
    for idx, cand in enumerate(candidates):
        if trainer.kind == "exact":
            plan = value_iteration(cand.mdp, tol=tol)
            policy = plan.policy
            effort = plan.iterations
        else:
            episodes = trainer.episodes_for(idx)
            config = QLearningConfig(episodes=episodes,
                                     horizon=trainer.horizon,
                                     alpha0=trainer.alpha0,
                                     alpha_decay=trainer.alpha_decay,
                                     eps0=trainer.eps0,
                                     eps_decay=trainer.eps_decay,
                                     eps_min=trainer.eps_min)
            result = q_learning(cand.mdp, config,
                                seed=split_seed(seed, "train", cand.id),
                                rho=rho)
            policy = result.policy
            effort = episodes
        train_sub = suboptimality(cand.mdp, policy, rho, tol=tol)
        train_value = float(rho @ policy_evaluation(cand.mdp, policy, tol=tol))
        v_deploy = float(rho @ policy_evaluation(real, policy, tol=tol))
        deploy_sub = v_star_rho - v_deploy
        if deploy_sub < 0.0:
            if deploy_sub < -2.0 * tol:
                raise RuntimeError(
                    f"deployment gap {deploy_sub:.3e} below the clamp window")
            deploy_sub = 0.0
        runs.append(ExperimentRun(candidate_id=cand.id,
                                  bsm_scalar=float(bsm_scalars[cand.id]),
                                  train_suboptimality=train_sub,
                                  deploy_suboptimality=float(deploy_sub),
                                  deploy_value=v_deploy,
                                  train_value=train_value,
                                  training_effort=int(effort)))
    return runs


def select(runs: Sequence[ExperimentRun], strategy: str, ratio: float,
           seed: Optional[int] = None) -> list[int]:
    """Pick a candidate subset of size max(1, floor(ratio * pool)).

    ``evaluation`` keeps the lowest metric scalars, ``reward`` the highest
    in-twin trained values, ``random`` a seeded uniform subset; score ties
    break toward the lower candidate id.
    """
    if not runs:
        raise EmptyPoolError("cannot select from an empty pool")
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must be in (0, 1]")
    k = max(1, int(np.floor(ratio * len(runs))))
    if strategy == "evaluation":
        ranked = sorted(runs, key=lambda r: (r.bsm_scalar, r.candidate_id))
    elif strategy == "reward":
        ranked = sorted(runs, key=lambda r: (-r.train_value, r.candidate_id))
    elif strategy == "random":
        if seed is None:
            raise ValueError("random selection needs a seed")
        rng = np.random.default_rng(split_seed(seed, "select-random", 0))
        ids = [r.candidate_id for r in runs]
        picked = rng.choice(len(ids), size=k, replace=False)
        return sorted(ids[i] for i in picked)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return sorted(r.candidate_id for r in ranked[:k])


def cost_report(runs: Sequence[ExperimentRun], subset: Sequence[int],
                v_star_rho: float) -> CostReport:
    """Training/testing costs of a subset versus brute force over the pool.

    Testing cost is the summed deployment gap of every policy actually
    tested; the training reduction is exact rational arithmetic on counts.
    """
    by_id = {r.candidate_id: r for r in runs}
    subset = sorted(set(subset))
    if any(cid not in by_id for cid in subset):
        raise ValueError("subset contains unknown candidate ids")
    gap = {cid: max(0.0, v_star_rho - by_id[cid].deploy_value)
           for cid in by_id}
    test_subset = float(sum(gap[cid] for cid in subset))
    test_full = float(sum(gap.values()))
    train_red = Fraction(len(runs) - len(subset), len(runs))
    if test_full > 0.0:
        test_red = 1.0 - test_subset / test_full
    else:
        test_red = 0.0
    best = max(by_id[cid].deploy_value for cid in subset)
    return CostReport(n_trained=len(subset), n_tested=len(subset),
                      training_cost_reduction=float(train_red),
                      testing_cost=test_subset,
                      testing_cost_reduction=float(test_red),
                      best_deploy_value=float(best))


def _fit_vertices(constraints):
    """Vertices of {alpha, beta >= 0, alpha*b + beta*t >= d for all (b,t,d)}."""
    verts = [(0.0, 0.0)]
    for b, t, d in constraints:
        if b > 0.0:
            verts.append((d / b, 0.0))
        if t > 0.0:
            verts.append((0.0, d / t))
    n = len(constraints)
    for i in range(n):
        b1, t1, d1 = constraints[i]
        for j in range(i + 1, n):
            b2, t2, d2 = constraints[j]
            det = b1 * t2 - b2 * t1
            if abs(det) < 1e-300:
                continue
            alpha = (d1 * t2 - d2 * t1) / det
            beta = (b1 * d2 - b2 * d1) / det
            verts.append((alpha, beta))
    return verts


def fit_bound(runs: Sequence[ExperimentRun],
              fit_ids: Optional[Sequence[int]] = None,
              holdout_ids: Optional[Sequence[int]] = None) -> BoundFit:
    """Smallest (alpha + beta) with deploy <= alpha*bsm + beta*train on fit runs.

    A two-variable linear program solved by enumerating constraint-line
    intersections.  Defaults to the even-indexed runs for fitting and the
    odd-indexed runs as holdout; reports the fraction of holdout runs
    violating the fitted bound by more than 1e-9.
    """
    if not runs:
        raise EmptyPoolError("no runs to fit")
    if fit_ids is None and holdout_ids is None:
        fit_ids = [r.candidate_id for i, r in enumerate(runs) if i % 2 == 0]
        holdout_ids = [r.candidate_id for i, r in enumerate(runs) if i % 2 == 1]
    fit_ids = list(fit_ids or [])
    holdout_ids = list(holdout_ids or [])
    if set(fit_ids) & set(holdout_ids):
        raise ValueError("fit and holdout ids must be disjoint")
    by_id = {r.candidate_id: r for r in runs}
    fit_runs = [by_id[c] for c in fit_ids]
    active = [(r.bsm_scalar, r.train_suboptimality, r.deploy_suboptimality)
              for r in fit_runs
              if r.deploy_suboptimality > BOUND_SLACK]
    for b, t, d in active:
        if b <= 0.0 and t <= 0.0:
            raise DegenerateFitError(
                "a fit run has positive deployment gap but zero mismatch and "
                "zero training gap; the bound is infeasible on this data")
    if not active:
        alpha, beta = 0.0, 0.0
    else:
        best = None
        for alpha, beta in _fit_vertices(active):
            if alpha < -1e-12 or beta < -1e-12:
                continue
            alpha = max(alpha, 0.0)
            beta = max(beta, 0.0)
            if all(alpha * b + beta * t >= d - BOUND_SLACK
                   for b, t, d in active):
                key = (alpha + beta, alpha)
                if best is None or key < best[0]:
                    best = (key, alpha, beta)
        if best is None:
            raise DegenerateFitError("no feasible (alpha, beta) vertex found")
        alpha, beta = best[1], best[2]
    violations = sum(
        1 for c in fit_ids
        if by_id[c].deploy_suboptimality >
        alpha * by_id[c].bsm_scalar + beta * by_id[c].train_suboptimality
        + BOUND_SLACK)
    if violations:
        raise DegenerateFitError(f"{violations} fit runs violate the bound "
                                 "after fitting (numerical degeneracy)")
    n_viol = sum(
        1 for c in holdout_ids
        if by_id[c].deploy_suboptimality >
        alpha * by_id[c].bsm_scalar + beta * by_id[c].train_suboptimality
        + BOUND_SLACK)
    rate = n_viol / len(holdout_ids) if holdout_ids else 0.0
    return BoundFit(alpha=float(alpha), beta=float(beta),
                    fit_ids=tuple(fit_ids), holdout_ids=tuple(holdout_ids),
                    holdout_violation_rate=float(rate))
