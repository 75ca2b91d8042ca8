"""Finite MDPs: representation, exact planning, simulation, Q-learning.

The same ``FiniteMdp`` object serves as the "real network" and as every
candidate digital twin.  Rewards are normalized to [0, 1] so the pairwise
metric is uniformly bounded by 1/(1-gamma); environment builders have to
rescale before constructing one of these.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .exceptions import IndexOutOfRangeError, NotConvergedError
from .rng import splitmix64_next

ROW_SUM_TOL = 1e-9
DEFAULT_PLAN_TOL = 1e-8


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP: transitions[s, a, s'], rewards[s, a], discount gamma.

    Immutable after construction; arrays are marked read-only so instances
    can be shared across worker threads.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    state_labels: Optional[tuple] = None
    action_labels: Optional[tuple] = None

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.transitions, dtype=np.float64))
        r = np.ascontiguousarray(np.asarray(self.rewards, dtype=np.float64))
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transitions must be (S, A, S), got {t.shape}")
        if r.shape != t.shape[:2]:
            raise ValueError(f"rewards must be (S, A), got {r.shape}")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transitions", t)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass(frozen=True)
class Policy:
    """Deterministic (state -> action) or stochastic (state -> distribution)."""

    kind: str
    actions: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "deterministic":
            if self.actions is None:
                raise ValueError("deterministic policy needs an action map")
            a = np.asarray(self.actions, dtype=np.int64)
            a.setflags(write=False)
            object.__setattr__(self, "actions", a)
        elif self.kind == "stochastic":
            if self.probs is None:
                raise ValueError("stochastic policy needs a probability matrix")
            p = np.asarray(self.probs, dtype=np.float64)
            rows = p.sum(axis=1)
            if np.any(np.abs(rows - 1.0) > ROW_SUM_TOL) or np.any(p < 0.0):
                raise ValueError("stochastic policy rows must be distributions")
            p.setflags(write=False)
            object.__setattr__(self, "probs", p)
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def matrix(self, n_actions: int) -> np.ndarray:
        """Policy as a (S, A) probability matrix."""
        if self.kind == "stochastic":
            return self.probs
        out = np.zeros((len(self.actions), n_actions))
        out[np.arange(len(self.actions)), self.actions] = 1.0
        return out


@dataclass(frozen=True)
class PlanResult:
    """Output of value iteration: values, greedy policy, diagnostics."""

    values: np.ndarray
    policy: Policy
    iterations: int
    residual: float
    converged: bool
    residual_history: np.ndarray


@dataclass(frozen=True)
class QLearningResult:
    policy: Policy
    return_estimate: float
    q: np.ndarray
    episode_returns: np.ndarray


def validate(mdp: FiniteMdp) -> list[str]:
    """Check FiniteMdp invariants; returns one message per violation."""
    violations = []
    t, r = mdp.transitions, mdp.rewards
    row_sums = t.sum(axis=2)
    bad = np.argwhere(np.abs(row_sums - 1.0) > ROW_SUM_TOL)
    for s, a in bad:
        violations.append(
            f"transition row (s={s}, a={a}) sums to {row_sums[s, a]!r}, "
            f"outside 1 +/- {ROW_SUM_TOL}")
    neg = np.argwhere(t < 0.0)
    for s, a, sn in neg[:20]:
        violations.append(f"transition ({s}, {a}, {sn}) is negative: {t[s, a, sn]!r}")
    bad_r = np.argwhere((r < 0.0) | (r > 1.0))
    for s, a in bad_r:
        violations.append(f"reward out of [0,1] at (s={s}, a={a}): {r[s, a]!r}")
    if not (0.0 < mdp.gamma < 1.0):
        violations.append(f"gamma {mdp.gamma!r} outside (0, 1)")
    return violations


def _bellman_q(mdp: FiniteMdp, values: np.ndarray) -> np.ndarray:
    return mdp.rewards + mdp.gamma * (mdp.transitions @ values)


def value_iteration(mdp: FiniteMdp, tol: float = DEFAULT_PLAN_TOL,
                    max_iter: int = 100_000) -> PlanResult:
    """Iterate the Bellman optimality operator from V = 0.

    Stops once the sup-norm change drops to ``tol``; the returned values
    then satisfy ||Bellman(V) - V||_inf <= gamma * tol <= tol.  The greedy
    policy breaks ties by lowest action index.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    history = []
    converged = False
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        q = _bellman_q(mdp, v)
        v_next = q.max(axis=1)
        residual = float(np.max(np.abs(v_next - v)))
        history.append(residual)
        v = v_next
        if residual <= tol:
            converged = True
            break
    q = _bellman_q(mdp, v)
    policy = Policy("deterministic", actions=np.argmax(q, axis=1))
    return PlanResult(values=v, policy=policy, iterations=iterations,
                      residual=residual, converged=converged,
                      residual_history=np.asarray(history))


def _policy_matrices(mdp: FiniteMdp, policy: Policy):
    if policy.kind == "deterministic":
        a = policy.actions
        if len(a) != mdp.n_states:
            raise ValueError("policy does not cover the state space")
        p_pi = mdp.transitions[np.arange(mdp.n_states), a, :]
        r_pi = mdp.rewards[np.arange(mdp.n_states), a]
    else:
        pi = policy.probs
        if pi.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError("policy matrix shape mismatch")
        p_pi = np.einsum("sa,sat->st", pi, mdp.transitions)
        r_pi = np.sum(pi * mdp.rewards, axis=1)
    return r_pi, p_pi


def policy_evaluation(mdp: FiniteMdp, policy: Policy,
                      tol: float = DEFAULT_PLAN_TOL) -> np.ndarray:
    """Exact V^pi via the linear system (I - gamma P^pi) V = R^pi."""
    r_pi, p_pi = _policy_matrices(mdp, policy)
    a = np.eye(mdp.n_states) - mdp.gamma * p_pi
    v = np.linalg.solve(a, r_pi)
    residual = float(np.max(np.abs(v - (r_pi + mdp.gamma * (p_pi @ v)))))
    if residual > tol:
        raise NotConvergedError(
            f"policy evaluation residual {residual:.3e} exceeds tol {tol:.3e}")
    return v


def suboptimality(mdp: FiniteMdp, policy: Policy,
                  rho: Optional[np.ndarray] = None,
                  tol: float = DEFAULT_PLAN_TOL) -> float:
    """rho-weighted gap between the optimal value and V^pi, clamped at 0.

    Plans internally at a tightened tolerance so the result can only go
    negative by at most ``tol`` in float arithmetic; anything within
    -2*tol is clamped to zero.
    """
    rho = _check_rho(mdp.n_states, rho)
    inner_tol = tol * (1.0 - mdp.gamma)
    plan = value_iteration(mdp, tol=inner_tol)
    if not plan.converged:
        raise NotConvergedError("value iteration did not converge in suboptimality")
    v_pi = policy_evaluation(mdp, policy, tol=tol)
    gap = float(rho @ (plan.values - v_pi))
    if gap < 0.0:
        if gap < -2.0 * tol:
            raise NotConvergedError(
                f"suboptimality {gap:.3e} below the -2*tol clamp window")
        gap = 0.0
    return gap


def _check_rho(n_states: int, rho: Optional[np.ndarray]) -> np.ndarray:
    if rho is None:
        return np.full(n_states, 1.0 / n_states)
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (n_states,) or np.any(rho < 0.0) or abs(rho.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError("rho must be a distribution over states")
    return rho


def step(mdp: FiniteMdp, s: int, a: int, rng_state: int):
    """Advance the simulator one transition: returns (reward, next state, rng state).

    The next state is drawn by inverse CDF over increasing state index from
    a single SplitMix64 uniform, so the call is a pure function of
    ``rng_state``.
    """
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexOutOfRangeError(f"state/action ({s}, {a}) out of range")
    rng_state, u = splitmix64_next(rng_state)
    row = mdp.transitions[s, a]
    cdf = np.cumsum(row)
    nxt = int(np.searchsorted(cdf, u, side="right"))
    last = int(np.nonzero(row)[0][-1])
    if nxt > last:
        nxt = last
    return float(mdp.rewards[s, a]), nxt, rng_state


def _sampling_tables(mdp: FiniteMdp):
    cdf = np.cumsum(mdp.transitions, axis=2)
    pos = mdp.transitions > 0.0
    last = np.where(pos.any(axis=2),
                    mdp.transitions.shape[2] - 1 - np.argmax(pos[:, :, ::-1], axis=2),
                    0).astype(np.int64)
    return np.ascontiguousarray(cdf), np.ascontiguousarray(last)


@dataclass(frozen=True)
class QLearningConfig:
    """Schedules for tabular Q-learning; per-episode exponential decays."""

    episodes: int
    horizon: int = 40
    alpha0: float = 0.5
    alpha_decay: float = 1.0
    alpha_min: float = 0.05
    eps0: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.05

    def __post_init__(self):
        if self.episodes < 0 or self.horizon < 1:
            raise ValueError("episodes must be >= 0 and horizon >= 1")
        for name in ("alpha0", "alpha_min"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")
        for name in ("alpha_decay", "eps_decay"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")
        for name in ("eps0", "eps_min"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")


def q_learning(mdp: FiniteMdp, config: QLearningConfig, seed: int,
               rho: Optional[np.ndarray] = None) -> QLearningResult:
    """Train a tabular Q-learner inside ``mdp`` used as a simulator.

    Low episode budgets deliberately produce suboptimal greedy policies;
    that controlled training gap is what the bound-fitting harness needs.
    The return estimate is the mean discounted return over the last tenth
    of the episodes (0.0 when no episodes were run).
    """
    rho = _check_rho(mdp.n_states, rho)
    cdf, last = _sampling_tables(mdp)
    rho_cdf = np.cumsum(rho)
    rho_last = int(np.nonzero(rho)[0][-1])
    q, returns = _kernels.q_learning_core(
        cdf, last, mdp.rewards, rho_cdf, rho_last, mdp.gamma,
        config.episodes, config.horizon,
        config.alpha0, config.alpha_decay, config.alpha_min,
        config.eps0, config.eps_decay, config.eps_min,
        np.uint64(seed))
    policy = Policy("deterministic", actions=np.argmax(q, axis=1))
    if config.episodes > 0:
        tail = max(1, config.episodes // 10)
        estimate = float(np.mean(returns[-tail:]))
    else:
        estimate = 0.0
    return QLearningResult(policy=policy, return_estimate=estimate,
                           q=q, episode_returns=returns)


def random_mdp(n_states: int, n_actions: int, gamma: float = 0.9,
               seed: int = 0, sparsity: float = 0.0) -> FiniteMdp:
    """Random dense-ish MDP with Dirichlet rows and uniform rewards in [0,1]."""
    rng = np.random.default_rng(seed)
    t = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0.0:
        mask = rng.random((n_states, n_actions, n_states)) < sparsity
        keep_one = np.zeros_like(mask)
        keep_one[:, :, 0] = True
        t = np.where(mask & ~keep_one, 0.0, t)
        t = t / t.sum(axis=2, keepdims=True)
    r = rng.random((n_states, n_actions))
    return FiniteMdp(transitions=t, rewards=r, gamma=gamma)
