"""Trajectory sampling and empirical MDP reconstruction.

Sampling happens under a default behavior (uniform-random actions unless a
policy is supplied) because transition probabilities and rewards are
properties of the environment, not of any particular controller; the
reconstruction then turns counted transitions into a smoothed tabular
model.  The sample-size sweep reports how the worst-case mismatch of the
reconstruction shrinks as the batch grows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from .bisim import compute_metric, scalarize
from .exceptions import EmptyBatchError
from .mdp import FiniteMdp, Policy, _check_rho, _sampling_tables


@dataclass(frozen=True)
class TransitionSample:
    t: int
    s: int
    a: int
    r: float
    sn: int
    episode: int


@dataclass(frozen=True)
class TrajectoryBatch:
    """Struct-of-arrays sample log with seed provenance.

    Within an episode consecutive samples chain: sn at step t equals s at
    step t+1.
    """

    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    sn: np.ndarray
    episode: np.ndarray
    seed: int
    behavior: str

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> TransitionSample:
        return TransitionSample(int(self.t[i]), int(self.s[i]), int(self.a[i]),
                                float(self.r[i]), int(self.sn[i]),
                                int(self.episode[i]))


def sample_trajectories(env: FiniteMdp,
                        behavior: Union[str, Policy] = "uniform",
                        n_steps: int = 1000,
                        episode_length: int = 100,
                        seed: int = 0,
                        rho: Optional[np.ndarray] = None) -> TrajectoryBatch:
    """Collect exactly ``n_steps`` transitions, restarting every episode.

    Episodes restart from ``rho`` (uniform by default) every
    ``episode_length`` steps.  One SplitMix64 uniform is drawn per reset,
    per action and per transition, in that order, so batches are bitwise
    reproducible per seed and consistent with repeated ``mdp.step`` calls.
    """
    if n_steps < 1 or episode_length < 1:
        raise ValueError("n_steps and episode_length must be >= 1")
    rho = _check_rho(env.n_states, rho)
    cdf, last = _sampling_tables(env)
    if behavior == "uniform":
        pol = np.full((env.n_states, env.n_actions), 1.0 / env.n_actions)
        behavior_tag = "uniform"
    elif isinstance(behavior, Policy):
        pol = behavior.matrix(env.n_actions)
        behavior_tag = behavior.kind
    else:
        raise ValueError(f"unknown behavior {behavior!r}")
    pol_cdf = np.ascontiguousarray(np.cumsum(pol, axis=1))
    pol_last = np.array([int(np.nonzero(row)[0][-1]) for row in pol],
                        dtype=np.int64)
    rho_cdf = np.cumsum(rho)
    rho_last = int(np.nonzero(rho)[0][-1])
    s, a, sn, ep, _ = _kernels.sample_chain(
        cdf, last, pol_cdf, pol_last, rho_cdf, rho_last,
        n_steps, episode_length, np.uint64(seed))
    r = env.rewards[s, a]
    return TrajectoryBatch(t=np.arange(n_steps), s=s, a=a, r=r, sn=sn,
                           episode=ep, seed=int(seed), behavior=behavior_tag)


def estimate_mdp(batch: TrajectoryBatch, n_states: int, n_actions: int,
                 gamma: float, kappa: float = 0.0) -> FiniteMdp:
    """Empirical MDP from counted transitions with additive smoothing.

    P(s'|s, a) = (N(s,a,s') + kappa) / (N(s,a) + kappa * n_states); with
    kappa = 0 an unvisited (s, a) falls back to the uniform row.  Rewards
    are per-(s, a) means of observed rewards, 0.5 for unvisited pairs.
    """
    if len(batch) == 0:
        raise EmptyBatchError("cannot estimate an MDP from an empty batch")
    if kappa < 0.0:
        raise ValueError("kappa must be >= 0")
    if batch.s.max() >= n_states or batch.a.max() >= n_actions \
            or batch.sn.max() >= n_states:
        raise ValueError("batch contains indices outside the declared sizes")
    flat = (batch.s * n_actions + batch.a) * n_states + batch.sn
    counts = np.bincount(flat, minlength=n_states * n_actions * n_states) \
        .reshape(n_states, n_actions, n_states).astype(np.float64)
    visits = counts.sum(axis=2)
    flat_sa = batch.s * n_actions + batch.a
    r_sum = np.bincount(flat_sa, weights=batch.r,
                        minlength=n_states * n_actions) \
        .reshape(n_states, n_actions)
    visited = visits > 0
    rewards = np.full((n_states, n_actions), 0.5)
    rewards[visited] = r_sum[visited] / visits[visited]
    if kappa > 0.0:
        transitions = (counts + kappa) / (visits + kappa * n_states)[:, :, None]
    else:
        uniform = np.full(n_states, 1.0 / n_states)
        transitions = np.where(visited[:, :, None],
                               counts / np.where(visits == 0, 1.0, visits)[:, :, None],
                               uniform[None, None, :])
    return FiniteMdp(transitions=transitions, rewards=rewards, gamma=gamma)


@dataclass(frozen=True)
class SweepResult:
    """Mismatch-versus-sample-size curve: medians across seeds per size."""

    sizes: tuple
    medians: np.ndarray
    scalars: np.ndarray  # shape (len(sizes), len(seeds))
    seeds: tuple

    @property
    def curve(self) -> list[tuple[int, float]]:
        return [(int(n), float(m)) for n, m in zip(self.sizes, self.medians)]


def sample_sweep(env: FiniteMdp, dt_truth: FiniteMdp,
                 sizes: Sequence[int], seeds: Sequence[int],
                 kappa: float = 0.0, episode_length: int = 100,
                 metric_tol: float = 1e-6) -> SweepResult:
    """Reconstruction quality curve: worst-case mismatch vs batch size.

    For every (size, seed) cell an MDP is estimated from ``env`` samples
    and compared to ``dt_truth``; the curve reports the median worst-case
    scalar across seeds.  Deterministic given (sizes, seeds).
    """
    sizes = [int(n) for n in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    scalars = np.empty((len(sizes), len(seeds)))
    for i, n_steps in enumerate(sizes):
        for j, seed in enumerate(seeds):
            batch = sample_trajectories(env, "uniform", n_steps,
                                        episode_length, seed)
            est = estimate_mdp(batch, env.n_states, env.n_actions,
                               env.gamma, kappa)
            metric = compute_metric(dt_truth, est, tol=metric_tol)
            scalars[i, j] = scalarize(metric, "worst_case").scalar_max
    medians = np.median(scalars, axis=1)
    return SweepResult(sizes=tuple(sizes), medians=medians, scalars=scalars,
                       seeds=tuple(int(s) for s in seeds))
