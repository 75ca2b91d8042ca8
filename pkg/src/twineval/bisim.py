"""Pairwise bisimulation metric between a real environment and a twin MDP.

The metric is the least fixed point (from the zero matrix) of

    d(s, s') = max_a |R(s, a) - R'(s', a)| + gamma * W1(P(.|s, a), P'(.|s', a); d)

computed by synchronous sweeps.  With exact inner transport the operator
is a gamma-contraction and monotone from the zero start, so iterates are
entrywise nondecreasing and successive sup-norm changes shrink by at
least gamma per sweep; the true fixed-point error after stopping at
residual r is bounded by r * gamma / (1 - gamma).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .exceptions import (ActionSpaceMismatchError, DiscountMismatchError,
                         ShapeMismatchError)
from .mdp import FiniteMdp

DEFAULT_METRIC_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 1000
_MAX_PIVOTS = 200_000
_GAMMA_TOL = 1e-12


@dataclass(frozen=True)
class PairwiseMetric:
    """Metric matrix d[real_state, twin_state] plus convergence diagnostics."""

    d: np.ndarray
    iterations: int
    residual: float
    converged: bool
    gamma: float
    residual_history: np.ndarray


@dataclass(frozen=True)
class MismatchReport:
    """Scalar mismatch summaries over the identity state pairing."""

    scalar_max: float
    scalar_avg: float
    weights_used: np.ndarray
    metric: PairwiseMetric


def _check_pair(real: FiniteMdp, twin: FiniteMdp):
    if real.n_actions != twin.n_actions:
        raise ActionSpaceMismatchError(
            f"action spaces differ: {real.n_actions} vs {twin.n_actions}")
    if abs(real.gamma - twin.gamma) > _GAMMA_TOL:
        raise DiscountMismatchError(
            f"discounts differ: {real.gamma!r} vs {twin.gamma!r}")


def _padded_supports(mdp: FiniteMdp):
    """Per-(s, a) transition supports padded to a common length."""
    t = mdp.transitions
    n_s, n_a, _ = t.shape
    rows = [[np.flatnonzero(t[s, a]) for a in range(n_a)] for s in range(n_s)]
    maxlen = max(max(len(r) for r in per_s) for per_s in rows)
    idx = np.zeros((n_s, n_a, maxlen), dtype=np.int64)
    val = np.zeros((n_s, n_a, maxlen), dtype=np.float64)
    lens = np.zeros((n_s, n_a), dtype=np.int64)
    for s in range(n_s):
        for a in range(n_a):
            supp = rows[s][a]
            k = len(supp)
            lens[s, a] = k
            idx[s, a, :k] = supp
            val[s, a, :k] = t[s, a, supp]
    return idx, val, lens


class _SweepState:
    """Support tables and per-cell warm-start buffers for repeated sweeps."""

    def __init__(self, real: FiniteMdp, twin: FiniteMdp, inner_solver: str):
        self.s1_idx, self.s1_val, self.s1_len = _padded_supports(real)
        self.s2_idx, self.s2_val, self.s2_len = _padded_supports(twin)
        self.dr = np.ascontiguousarray(
            np.abs(real.rewards[:, None, :] - twin.rewards[None, :, :]))
        cells = real.n_states * twin.n_states
        n_a = real.n_actions
        maxm = self.s1_idx.shape[2]
        maxn = self.s2_idx.shape[2]
        if inner_solver == "exact":
            nb = maxm + maxn - 1
            self.BI = np.zeros((cells, n_a, nb), dtype=np.int32)
            self.BJ = np.zeros((cells, n_a, nb), dtype=np.int32)
            self.BF = np.zeros((cells, n_a, nb), dtype=np.float64)
            self.BV = np.zeros((cells, n_a), dtype=np.uint8)
            self.W1L = np.zeros((cells, n_a), dtype=np.float64)
            self.SL = np.zeros((cells, n_a), dtype=np.float64)
            self.WV = np.zeros((cells, n_a), dtype=np.uint8)
        elif inner_solver == "sinkhorn":
            self.F = np.zeros((cells, n_a, maxm), dtype=np.float64)
            self.G = np.zeros((cells, n_a, maxn), dtype=np.float64)
            self.FV = np.zeros((cells, n_a), dtype=np.uint8)
        else:
            raise ValueError(f"unknown inner solver {inner_solver!r}")
        self.inner_solver = inner_solver

    def apply(self, gamma: float, d: np.ndarray, out: np.ndarray,
              sinkhorn_epsilon: float, sinkhorn_scale: float,
              sinkhorn_max_iter: int, delta_prev: float = np.inf):
        if self.inner_solver == "exact":
            margin = 1e-11 * (1.0 + float(d.max()))
            _kernels.bsm_sweep_exact(
                self.s1_idx, self.s1_val, self.s1_len,
                self.s2_idx, self.s2_val, self.s2_len,
                self.dr, gamma, d, out,
                self.BI, self.BJ, self.BF, self.BV,
                self.W1L, self.SL, self.WV,
                delta_prev if np.isfinite(delta_prev) else 1.0e300,
                margin, _MAX_PIVOTS)
        else:
            _kernels.bsm_sweep_sinkhorn(
                self.s1_idx, self.s1_val, self.s1_len,
                self.s2_idx, self.s2_val, self.s2_len,
                self.dr, gamma, d, out,
                self.F, self.G, self.FV,
                sinkhorn_epsilon, sinkhorn_scale, sinkhorn_max_iter, 1e-6)


def bsm_step(real: FiniteMdp, twin: FiniteMdp, d: np.ndarray,
             inner_solver: str = "exact",
             sinkhorn_epsilon: Optional[float] = None,
             sinkhorn_scale: float = 1e-3,
             sinkhorn_max_iter: int = 10_000) -> np.ndarray:
    """One application of the metric operator to ground cost ``d``."""
    _check_pair(real, twin)
    d = np.ascontiguousarray(np.asarray(d, dtype=np.float64))
    if d.shape != (real.n_states, twin.n_states):
        raise ValueError(f"d has shape {d.shape}, expected "
                         f"({real.n_states}, {twin.n_states})")
    if np.any(d < 0.0):
        raise ValueError("d must be nonnegative")
    state = _SweepState(real, twin, inner_solver)
    out = np.empty_like(d)
    state.apply(real.gamma, d, out,
                -1.0 if sinkhorn_epsilon is None else float(sinkhorn_epsilon),
                sinkhorn_scale, sinkhorn_max_iter)
    if np.isnan(out).any():
        raise RuntimeError("inner transport solver failed (pivot cap)")
    return out


def compute_metric(real: FiniteMdp, twin: FiniteMdp,
                   tol: float = DEFAULT_METRIC_TOL,
                   max_iter: int = DEFAULT_MAX_SWEEPS,
                   inner_solver: str = "exact",
                   sinkhorn_epsilon: Optional[float] = None,
                   sinkhorn_scale: float = 1e-3,
                   sinkhorn_max_iter: int = 10_000) -> PairwiseMetric:
    """Fixed point of the metric operator from the zero initialization.

    Stops when the sup-norm sweep change reaches ``tol`` or after
    ``max_iter`` sweeps (``converged`` reports which).  The residual is
    always reported so callers can bound the remaining fixed-point error
    by residual * gamma / (1 - gamma).
    """
    _check_pair(real, twin)
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    state = _SweepState(real, twin, inner_solver)
    eps_abs = -1.0 if sinkhorn_epsilon is None else float(sinkhorn_epsilon)
    d = np.zeros((real.n_states, twin.n_states))
    out = np.empty_like(d)
    history = []
    converged = False
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        state.apply(real.gamma, d, out, eps_abs, sinkhorn_scale,
                    sinkhorn_max_iter, delta_prev=residual)
        residual = float(np.max(np.abs(out - d)))
        history.append(residual)
        d, out = out, d
        if np.isnan(residual):
            raise RuntimeError("inner transport solver failed (pivot cap)")
        if residual <= tol:
            converged = True
            break
    return PairwiseMetric(d=d, iterations=iterations, residual=residual,
                          converged=converged, gamma=real.gamma,
                          residual_history=np.asarray(history))


def scalarize(metric: PairwiseMetric, mode: str = "worst_case",
              weights: Optional[np.ndarray] = None) -> MismatchReport:
    """Reduce the metric matrix to a scalar over the identity pairing.

    ``worst_case`` takes max_s d[s, s]; ``average`` takes the
    weights-weighted mean of the diagonal (uniform when omitted).  Both
    require equally sized state spaces with shared indexing.
    """
    d = metric.d
    if d.shape[0] != d.shape[1]:
        raise ShapeMismatchError(
            f"identity pairing impossible for shape {d.shape}")
    diag = np.diagonal(d)
    n = d.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,) or np.any(weights < 0.0) or \
                abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a distribution over states")
    if mode not in ("worst_case", "average"):
        raise ValueError(f"unknown scalarization mode {mode!r}")
    return MismatchReport(scalar_max=float(diag.max()),
                          scalar_avg=float(weights @ diag),
                          weights_used=weights, metric=metric)


def drift_trigger(current_mismatch: float, threshold: float) -> bool:
    """True iff the mismatch strictly exceeds the resync threshold."""
    if current_mismatch < 0.0 or threshold < 0.0:
        raise ValueError("mismatch and threshold must be nonnegative")
    return current_mismatch > threshold
