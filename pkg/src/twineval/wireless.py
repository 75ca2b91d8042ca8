"""Synthetic uplink resource-allocation environment and the candidate-twin pool.

The real environment is a small weighted-sum-throughput scheduler: states
are joint quantized per-UE backlogs, actions are resource-block
allocations, and arrivals follow per-UE profiles chosen to make the UEs
behaviorally distinct (periodic / bursty / steady).  The candidate pool
spans four fidelity-degradation families so the experiment harness sees
twins ranging from exact copies to badly mismatched models.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimation import estimate_mdp, sample_trajectories
from .exceptions import SpecTooLargeError
from .mdp import FiniteMdp
from .rng import split_seed

# per-UE arrival outcome distributions, (units, probability)
ARRIVAL_PROFILES = {
    "periodic": ((1, 0.9), (2, 0.1)),
    "bursty": ((0, 0.7), (3, 0.3)),
    "steady": ((1, 0.8), (2, 0.2)),
}

DEFAULT_TABLE_BUDGET = 10_000_000


@dataclass(frozen=True)
class EnvSpec:
    """Knobs of the synthetic scheduler environment."""

    n_ues: int = 3
    n_blocks: int = 3
    backlog_levels: int = 3
    weights: tuple = (3.0, 2.0, 1.0)
    arrival_profiles: tuple = ("periodic", "bursty", "steady")
    capacity_per_block: int = 1
    gamma: float = 0.9
    seed: int = 0
    table_budget: int = DEFAULT_TABLE_BUDGET

    def __post_init__(self):
        if self.n_ues < 1:
            raise ValueError("n_ues must be >= 1")
        if len(self.weights) != self.n_ues or any(w <= 0 for w in self.weights):
            raise ValueError("weights must be positive, one per UE")
        if len(self.arrival_profiles) != self.n_ues:
            raise ValueError("need one arrival profile per UE")
        for p in self.arrival_profiles:
            if p not in ARRIVAL_PROFILES:
                raise ValueError(f"unknown arrival profile {p!r}")
        if self.backlog_levels < 1 or self.n_blocks < 0 \
                or self.capacity_per_block < 1:
            raise ValueError("backlog_levels/capacity must be >= 1, n_blocks >= 0")

    @property
    def n_states(self) -> int:
        return self.backlog_levels ** self.n_ues

    @property
    def n_actions(self) -> int:
        return math.comb(self.n_blocks + self.n_ues - 1, self.n_ues - 1)


@dataclass(frozen=True)
class CandidateDT:
    """A candidate twin plus the recipe that produced it."""

    id: int
    mdp: FiniteMdp
    family: str
    params: dict
    seed: int


def _states(spec: EnvSpec):
    return list(itertools.product(range(spec.backlog_levels),
                                  repeat=spec.n_ues))


def _allocations(spec: EnvSpec):
    """All ways to split n_blocks across UEs, lexicographic order."""
    allocs = []
    for combo in itertools.combinations_with_replacement(
            range(spec.n_ues), spec.n_blocks):
        counts = [0] * spec.n_ues
        for u in combo:
            counts[u] += 1
        allocs.append(tuple(counts))
    allocs = sorted(set(allocs))
    return allocs


def build_real_env(spec: EnvSpec) -> FiniteMdp:
    """Assemble the scheduler MDP exactly by enumerating arrival outcomes.

    Reward is the weighted sum of served traffic, normalized by
    sum_i w_i * min(max backlog, n_blocks * capacity) so it lies in [0, 1];
    next backlogs clamp at the top quantization level (overflow traffic is
    dropped, unpenalized beyond the reward it can never earn).
    """
    n_s = spec.n_states
    states = _states(spec)
    allocs = _allocations(spec)
    n_a = len(allocs)
    if n_s * n_s * n_a > spec.table_budget:
        raise SpecTooLargeError(
            f"|S|^2*|A| = {n_s * n_s * n_a} exceeds budget {spec.table_budget}")
    w = np.asarray(spec.weights, dtype=np.float64)
    w = w / w.sum()
    top = spec.backlog_levels - 1
    norm = float(np.sum(w * min(top, spec.n_blocks * spec.capacity_per_block)))
    state_index = {st: i for i, st in enumerate(states)}
    arrival_outcomes = [ARRIVAL_PROFILES[p] for p in spec.arrival_profiles]

    transitions = np.zeros((n_s, n_a, n_s))
    rewards = np.zeros((n_s, n_a))
    for si, backlog in enumerate(states):
        for ai, alloc in enumerate(allocs):
            served = [min(b, blocks * spec.capacity_per_block)
                      for b, blocks in zip(backlog, alloc)]
            if norm > 0.0:
                rewards[si, ai] = float(np.sum(w * served)) / norm
            base = [b - srv for b, srv in zip(backlog, served)]
            for combo in itertools.product(*arrival_outcomes):
                prob = 1.0
                nxt = []
                for ue in range(spec.n_ues):
                    units, p = combo[ue]
                    prob *= p
                    nxt.append(min(top, max(0, base[ue] + units)))
                transitions[si, ai, state_index[tuple(nxt)]] += prob
    labels = tuple("|".join(map(str, st)) for st in states)
    alabels = tuple("+".join(map(str, al)) for al in allocs)
    return FiniteMdp(transitions=transitions, rewards=rewards,
                     gamma=spec.gamma, state_labels=labels,
                     action_labels=alabels)


def _coarse_map(spec: EnvSpec, levels: int):
    """Nearest-level maps between full and reduced backlog quantizations."""
    top = spec.backlog_levels - 1
    if levels > 1:
        down = [int(math.floor(b * (levels - 1) / top + 0.5))
                for b in range(spec.backlog_levels)]
        up = [int(math.floor(c * top / (levels - 1) + 0.5))
              for c in range(levels)]
    else:
        down = [0] * spec.backlog_levels
        up = [top // 2]
    return down, up


def _coarse_candidate(real: FiniteMdp, spec: EnvSpec, levels: int) -> FiniteMdp:
    """Rebuild at a reduced backlog quantization, lifted back to full indexing."""
    import dataclasses
    coarse_spec = dataclasses.replace(spec, backlog_levels=levels)
    coarse = build_real_env(coarse_spec)
    down, up = _coarse_map(spec, levels)
    full_states = _states(spec)
    coarse_states = _states(coarse_spec)
    coarse_index = {st: i for i, st in enumerate(coarse_states)}
    full_index = {st: i for i, st in enumerate(full_states)}
    n_s = spec.n_states
    n_a = real.n_actions
    transitions = np.zeros((n_s, n_a, n_s))
    rewards = np.zeros((n_s, n_a))
    lift_state = [full_index[tuple(up[c] for c in st)] for st in coarse_states]
    for si, st in enumerate(full_states):
        ci = coarse_index[tuple(down[b] for b in st)]
        rewards[si] = coarse.rewards[ci]
        for ai in range(n_a):
            for cj, p in enumerate(coarse.transitions[ci, ai]):
                if p > 0.0:
                    transitions[si, ai, lift_state[cj]] += p
    return FiniteMdp(transitions=transitions, rewards=rewards,
                     gamma=spec.gamma, state_labels=real.state_labels,
                     action_labels=real.action_labels)


EMPIRICAL_SIZES = (100, 1_000, 10_000, 100_000)
SMOOTHING_RANGE = (0.05, 0.80)
NOISE_RANGE = (0.02, 0.50)


def recipe_plan(spec: EnvSpec, n_candidates: int) -> list[tuple[str, dict]]:
    """Deterministic (family, params) list tiling to exactly n_candidates.

    Slot 0 is always the lambda = 0 smoothing corner (an exact copy of the
    real environment), then one coarse rebuild per reduced quantization,
    then the remainder split evenly across the empirical / smoothing /
    reward-noise grids.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    plans: list[tuple[str, dict]] = [("smoothing", {"lam": 0.0})]
    for levels in range(spec.backlog_levels - 1, 0, -1):
        if len(plans) < n_candidates:
            plans.append(("coarse", {"levels": levels}))
    r = n_candidates - len(plans)
    n_emp = (r + 2) // 3
    n_smooth = (r + 1) // 3
    n_noise = r // 3
    for k in range(n_emp):
        plans.append(("empirical",
                      {"n_steps": EMPIRICAL_SIZES[k % len(EMPIRICAL_SIZES)],
                       "draw": k}))
    lo, hi = SMOOTHING_RANGE
    for k in range(n_smooth):
        lam = lo + (hi - lo) * (k / (n_smooth - 1) if n_smooth > 1 else 0.0)
        plans.append(("smoothing", {"lam": lam}))
    lo, hi = NOISE_RANGE
    for k in range(n_noise):
        sigma = lo * (hi / lo) ** (k / (n_noise - 1) if n_noise > 1 else 0.0)
        plans.append(("reward_noise", {"sigma": sigma, "draw": k}))
    return plans[:n_candidates]


def generate_candidates(real: FiniteMdp, spec: EnvSpec,
                        n_candidates: int = 120,
                        seed: int = 0) -> list[CandidateDT]:
    """Build the diversified candidate-twin pool, deterministic per seed."""
    plans = recipe_plan(spec, n_candidates)
    n_s = real.n_states
    candidates = []
    for cid, (family, params) in enumerate(plans):
        child = split_seed(seed, family, params.get("draw", 0))
        if family == "smoothing":
            lam = params["lam"]
            t = (1.0 - lam) * real.transitions + lam / n_s
            mdp = FiniteMdp(t, real.rewards, real.gamma)
        elif family == "reward_noise":
            rng = np.random.default_rng(child)
            r = np.clip(real.rewards + rng.normal(0.0, params["sigma"],
                                                  real.rewards.shape),
                        0.0, 1.0)
            mdp = FiniteMdp(real.transitions, r, real.gamma)
        elif family == "empirical":
            batch = sample_trajectories(real, "uniform", params["n_steps"],
                                        episode_length=100, seed=child)
            mdp = estimate_mdp(batch, n_s, real.n_actions, real.gamma,
                               kappa=0.0)
        elif family == "coarse":
            mdp = _coarse_candidate(real, spec, params["levels"])
        else:  # pragma: no cover
            raise ValueError(f"unknown family {family!r}")
        public_params = {k: v for k, v in params.items() if k != "draw"}
        candidates.append(CandidateDT(id=cid, mdp=mdp, family=family,
                                      params=public_params, seed=child))
    return candidates
