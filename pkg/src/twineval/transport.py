"""Discrete Wasserstein-1 between finite distributions under an arbitrary cost.

This is the inner solver of the pairwise-metric operator.  The exact path
is a transportation simplex (see ``_kernels``) returning an optimal basic
solution; the Sinkhorn path is a log-domain entropic approximation whose
plan is rounded to exact marginals, so its value is a biased estimate that
callers must not treat as a lower or upper bound.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import InfeasibleMassError, ValidationError

MASS_TOL = 1e-9
MARGINAL_TOL = 1e-7
DEFAULT_SINKHORN_MAX_ITER = 10_000
_MAX_PIVOTS = 200_000


@dataclass(frozen=True)
class TransportProblem:
    """Source distribution p, target distribution q, nonnegative cost matrix."""

    p: np.ndarray
    q: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        c = np.ascontiguousarray(np.asarray(self.cost, dtype=np.float64))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "cost", c)

    def validate(self) -> list[str]:
        violations = []
        for name, v in (("p", self.p), ("q", self.q)):
            if v.ndim != 1:
                violations.append(f"{name} must be 1-D")
                continue
            if np.any(v < 0.0):
                violations.append(f"{name} has negative entries")
            if abs(v.sum() - 1.0) > MASS_TOL:
                violations.append(f"{name} sums to {v.sum()!r}, not 1")
        if self.cost.shape != (self.p.shape[0], self.q.shape[0]):
            violations.append(f"cost shape {self.cost.shape} does not match (m, n)")
        elif np.any(self.cost < 0.0) or not np.all(np.isfinite(self.cost)):
            violations.append("cost entries must be finite and nonnegative")
        return violations


@dataclass(frozen=True)
class TransportSolution:
    value: float
    plan: np.ndarray
    status: str  # "optimal" | "approximate"
    converged: bool = True

    def to_json(self) -> str:
        """Diagnostic dump for debugging transport instances."""
        return json.dumps({
            "value": self.value,
            "status": self.status,
            "converged": self.converged,
            "plan": self.plan.tolist(),
        })


def _prepare(problem: TransportProblem):
    violations = problem.validate()
    if violations:
        raise ValidationError(violations)
    if abs(problem.p.sum() - problem.q.sum()) > MASS_TOL:
        raise InfeasibleMassError(
            f"total masses differ: {problem.p.sum()!r} vs {problem.q.sum()!r}")
    ip = np.flatnonzero(problem.p > 0.0)
    iq = np.flatnonzero(problem.q > 0.0)
    return ip, iq


def w1_exact(problem: TransportProblem) -> TransportSolution:
    """Exact W1: minimum of <plan, cost> over couplings of (p, q)."""
    ip, iq = _prepare(problem)
    a = problem.p[ip]
    b = problem.q[iq]
    c = np.ascontiguousarray(problem.cost[np.ix_(ip, iq)])
    value, sub_plan = _kernels.transport_solve_dense(a, b, c, _MAX_PIVOTS)
    if np.isnan(value):
        raise RuntimeError("transportation simplex hit its pivot cap")
    plan = np.zeros_like(problem.cost)
    plan[np.ix_(ip, iq)] = sub_plan
    return TransportSolution(value=float(value), plan=plan, status="optimal")


def w1_sinkhorn(problem: TransportProblem, epsilon: float,
                max_iter: int = DEFAULT_SINKHORN_MAX_ITER) -> TransportSolution:
    """Entropic-regularized W1 at regularization ``epsilon``.

    Log-domain updates with annealing from a coarse regularization; the
    returned plan is rounded to exact marginals.  ``converged`` is False
    when the column-marginal violation was still above 1e-6 at the
    iteration cap (the best iterate is returned anyway).
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    ip, iq = _prepare(problem)
    a = problem.p[ip]
    b = problem.q[iq]
    c = np.ascontiguousarray(problem.cost[np.ix_(ip, iq)])
    m, n = len(a), len(b)
    plan = np.zeros_like(problem.cost)
    if m == 1:
        sub = b[None, :].copy()  # unique coupling
    elif n == 1:
        sub = a[:, None].copy()
    elif c.max() == 0.0:
        sub = np.outer(a, b)  # any coupling is optimal at zero cost
    else:
        sub = None
    if sub is not None:
        value = float((sub * c).sum())
        plan[np.ix_(ip, iq)] = sub
        return TransportSolution(value=value, plan=plan, status="approximate")
    f = np.zeros(m)
    g = np.zeros(n)
    _, viol, ok = _kernels._sinkhorn_potentials(
        a, b, c, m, n, float(epsilon), f, g, False, max_iter, 1e-6)
    sub_plan = np.empty((m, n))
    value = _kernels._sinkhorn_plan_value(a, b, c, m, n, float(epsilon),
                                          f, g, sub_plan)
    plan[np.ix_(ip, iq)] = sub_plan
    return TransportSolution(value=float(value), plan=plan,
                             status="approximate", converged=bool(ok))
