"""Exact and iterative solvers for the agent best-response problem.

The admissible sets are boxes, optionally intersected with one linear
equality and a family of halfspaces.  Three solve paths cover the cases:

  - diagonal quadratic cost over box (+ sum): exact, via bisection on the
    scalar multiplier of the sum constraint;
  - vanishing quadratic cost (linear objective): exact greedy fill with
    minimum-norm tie-breaking, the Tikhonov limit;
  - dense quadratic cost or extra halfspaces: FISTA with restarts, projecting
    through :func:`knapsack_project` / :func:`dykstra_project`.

Everything is deterministic; batched variants operate on row-stacked agent
populations for the homogeneous games.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    InfeasibilityError,
    NumericalError,
    UnboundednessError,
    UsageError,
)
from .model import CONTROL_MEAN, AgentModel, GameInstance
from .space import Trajectory

__all__ = [
    "knapsack_project",
    "dykstra_project",
    "Box",
    "Hyperplane",
    "Halfspace",
    "KnapsackSet",
    "project_feasible",
    "best_response",
    "best_response_full",
    "br_objective",
    "decoupled_optima",
]

_KNAPSACK_MAX_ITERS = 200
_FISTA_MAX_ITERS = 50_000
_DYKSTRA_MAX_SWEEPS = 10_000


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("MFG_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def _bisect_box_sum(v: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                    gamma: np.ndarray) -> np.ndarray:
    """Rowwise projection onto {lo <= u <= hi, sum u = gamma}.

    Bisection on tau in u = clip(v - tau, lo, hi); the row sum is
    nonincreasing in tau, bracketed by the extreme pinning values.
    """
    v = np.atleast_2d(v)
    lo = np.broadcast_to(lo, v.shape)
    hi = np.broadcast_to(hi, v.shape)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))

    sum_lo = lo.sum(axis=1)
    sum_hi = hi.sum(axis=1)
    bad = (gamma < sum_lo - 1e-9 * (1 + np.abs(gamma))) | (
        gamma > sum_hi + 1e-9 * (1 + np.abs(gamma))
    )
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise InfeasibilityError(
            f"sum target {gamma[idx]:.6g} outside [{sum_lo[idx]:.6g}, {sum_hi[idx]:.6g}]"
        )

    t_lo = (v - hi).min(axis=1)   # all coordinates at hi -> max sum
    t_hi = (v - lo).max(axis=1)   # all coordinates at lo -> min sum
    tol = 1e-12 * np.maximum(1.0, np.abs(gamma))
    tau = 0.5 * (t_lo + t_hi)
    for _ in range(_KNAPSACK_MAX_ITERS):
        u = np.clip(v - tau[:, None], lo, hi)
        resid = u.sum(axis=1) - gamma
        if np.all(np.abs(resid) <= tol):
            break
        too_big = resid > 0.0
        t_lo = np.where(too_big, tau, t_lo)
        t_hi = np.where(too_big, t_hi, tau)
        tau = 0.5 * (t_lo + t_hi)
    return np.clip(v - tau[:, None], lo, hi)


def knapsack_project(v: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                     gamma: float) -> np.ndarray:
    """Euclidean projection onto {lower <= u <= upper, sum u = gamma}."""
    v = np.asarray(v, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), v.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), v.shape)
    out = _bisect_box_sum(v[None, :], lower[None, :], upper[None, :],
                          np.array([float(gamma)]))
    return out[0]


class Box:
    """Axis-aligned box with exact projection (clip)."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise InfeasibilityError("empty box")

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


class Hyperplane:
    """{x : a . x = b}."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = float(b)
        self._nsq = float(self.a @ self.a)
        if self._nsq == 0.0:
            raise UsageError("hyperplane normal must be nonzero")

    def project(self, x: np.ndarray) -> np.ndarray:
        return x + (self.b - self.a @ x) / self._nsq * self.a


class Halfspace:
    """{x : a . x <= b}."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = float(b)
        self._nsq = float(self.a @ self.a)
        if self._nsq == 0.0:
            raise UsageError("halfspace normal must be nonzero")

    def project(self, x: np.ndarray) -> np.ndarray:
        gap = self.a @ x - self.b
        if gap <= 0.0:
            return x
        return x - gap / self._nsq * self.a


class KnapsackSet:
    """Box intersected with a sum constraint, projected exactly."""

    def __init__(self, lower, upper, gamma):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.gamma = float(gamma)

    def project(self, x: np.ndarray) -> np.ndarray:
        return knapsack_project(x, self.lower, self.upper, self.gamma)


def dykstra_project(v: np.ndarray, sets: Sequence, tol: float = 1e-10,
                    max_sweeps: int = _DYKSTRA_MAX_SWEEPS) -> np.ndarray:
    """Dykstra's alternating projection onto the intersection of simple sets."""
    sets = list(sets)
    if not sets:
        raise UsageError("need at least one set")
    x = np.asarray(v, dtype=float).copy()
    if len(sets) == 1:
        return sets[0].project(x)
    increments = [np.zeros_like(x) for _ in sets]
    for _ in range(max_sweeps):
        x_prev = x.copy()
        # The iterate alone can repeat across a sweep while the corrections
        # still move, so the stopping test tracks both.
        drift = 0.0
        for s, p in zip(sets, increments):
            y = s.project(x + p)
            p_new = x + p - y
            drift = max(drift, float(np.linalg.norm(p_new - p)))
            p[...] = p_new
            x = y
        resid = max(float(np.linalg.norm(x - x_prev)), drift)
        if resid <= tol:
            return x
    raise NumericalError(
        f"Dykstra did not converge within {max_sweeps} sweeps", residual=resid
    )


def _base_projection(agent: AgentModel, v: np.ndarray) -> np.ndarray:
    """Projection onto box (and equality) ignoring the halfspace rows."""
    if agent.equality is None:
        return np.clip(v, agent.box_lower, agent.box_upper)
    e, gamma = agent.equality
    if np.all(e == 1.0):
        return knapsack_project(v, agent.box_lower, agent.box_upper, gamma)
    # General row vector: bisection on u = clip(v - tau e, lo, hi).
    return _bisect_box_sum_general(v, agent.box_lower, agent.box_upper, e, gamma)


def _bisect_box_sum_general(v, lo, hi, e, gamma) -> np.ndarray:
    nz = e != 0.0
    u = np.clip(v, lo, hi)
    if not np.any(nz):
        if abs(gamma) > 1e-12:
            raise InfeasibilityError("zero equality row with nonzero target")
        return u
    hi_pin = np.where(e > 0, hi, lo)
    lo_pin = np.where(e > 0, lo, hi)
    s_max = float(e[nz] @ hi_pin[nz])
    s_min = float(e[nz] @ lo_pin[nz])
    if not (s_min - 1e-9 <= gamma <= s_max + 1e-9):
        raise InfeasibilityError(f"equality target {gamma} outside [{s_min}, {s_max}]")
    t_lo = np.min((v[nz] - hi_pin[nz]) / e[nz])
    t_hi = np.max((v[nz] - lo_pin[nz]) / e[nz])
    tol = 1e-12 * max(1.0, abs(gamma))
    for _ in range(2 * _KNAPSACK_MAX_ITERS):
        tau = 0.5 * (t_lo + t_hi)
        u = np.clip(v - tau * e, lo, hi)
        resid = float(e @ u) - gamma
        if abs(resid) <= tol:
            return u
        if resid > 0:
            t_lo = tau
        else:
            t_hi = tau
    return u


def project_feasible(agent: AgentModel, v: np.ndarray) -> np.ndarray:
    """Projection onto the agent's full admissible set.

    The box/equality projection is computed exactly first; when the result
    already satisfies the halfspace rows it equals the projection onto the
    whole intersection, otherwise Dykstra runs over the exact pieces.
    """
    v = np.asarray(v, dtype=float)
    u = _base_projection(agent, v)
    if agent.inequalities is None:
        return u
    G, h = agent.inequalities
    if np.all(G @ u <= h + 1e-10 * (1.0 + np.abs(h))):
        return u
    sets: list = []
    if agent.equality is not None and np.all(agent.equality[0] == 1.0):
        sets.append(KnapsackSet(agent.box_lower, agent.box_upper, agent.equality[1]))
    else:
        sets.append(Box(agent.box_lower, agent.box_upper))
        if agent.equality is not None:
            sets.append(Hyperplane(*agent.equality))
    sets.extend(Halfspace(G[r], h[r]) for r in range(G.shape[0]))
    return dykstra_project(v, sets)


# ---------------------------------------------------------------------------
# Quadratic program over the admissible set
# ---------------------------------------------------------------------------

def _diag_of(Q: np.ndarray) -> np.ndarray | None:
    d = np.diag(Q).copy()
    off = Q - np.diag(d)
    if np.max(np.abs(off), initial=0.0) <= 1e-14 * (1.0 + np.max(np.abs(d), initial=0.0)):
        return d
    return None


def _power_lambda_max(M: np.ndarray, iters: int = 50) -> float:
    m = M.shape[0]
    x = np.ones(m) / np.sqrt(m)
    lam = 0.0
    for _ in range(iters):
        y = M @ x
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
    return lam


def _lp_box_sum(lin: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                gamma: float) -> np.ndarray:
    """min lin.u over box+sum; minimum-norm point among the minimizers."""
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)):
        raise UnboundednessError("linear objective over an unbounded box")
    order = np.argsort(lin, kind="stable")
    u = lo.copy()
    budget = gamma - float(lo.sum())
    if budget < -1e-9 * max(1.0, abs(gamma)):
        raise InfeasibilityError("sum target below the box floor")
    k = 0
    while k < order.size and budget > 0.0:
        # Tie group: equal costs share the marginal budget minimum-norm-wise.
        grp = [order[k]]
        ref = lin[order[k]]
        k += 1
        while k < order.size and abs(lin[order[k]] - ref) <= 1e-12 * (1.0 + abs(ref)):
            grp.append(order[k])
            k += 1
        grp = np.array(grp)
        cap = float((hi[grp] - lo[grp]).sum())
        if cap <= budget:
            u[grp] = hi[grp]
            budget -= cap
        else:
            u[grp] = knapsack_project(
                np.zeros(grp.size), lo[grp], hi[grp], float(lo[grp].sum()) + budget
            )
            budget = 0.0
    return u


def _lp_box(lin: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    lower_ok = np.isfinite(lo) | (lin <= 0)
    upper_ok = np.isfinite(hi) | (lin >= 0)
    if np.any(lin > 0) and np.any(~np.isfinite(lo[lin > 0])):
        raise UnboundednessError("linear objective decreases along an unbounded ray")
    if np.any(lin < 0) and np.any(~np.isfinite(hi[lin < 0])):
        raise UnboundednessError("linear objective decreases along an unbounded ray")
    del lower_ok, upper_ok
    mid = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
    u = np.where(lin > 0, lo, np.where(lin < 0, hi, mid))
    # Zero-cost coordinates: pick the minimum-norm feasible value.
    free = lin == 0
    u[free] = np.clip(0.0, lo[free], hi[free])
    return u


def _fista(quad: np.ndarray, lin: np.ndarray, project, x0: np.ndarray,
           grad_tol: float) -> np.ndarray:
    """FISTA with restart-on-increase for 0.5 u'(2 quad)u + lin'u over a set."""
    lam = _power_lambda_max(2.0 * quad)
    if lam <= 0.0:
        raise UnboundednessError("quadratic term vanished in the FISTA path")
    step = 1.0 / (lam + 1e-12)

    def grad(u):
        return 2.0 * (quad @ u) + lin

    def value(u):
        return float(u @ quad @ u + lin @ u)

    x = project(np.asarray(x0, dtype=float))
    y = x.copy()
    t = 1.0
    f_prev = value(x)
    scale = 1.0 + float(np.linalg.norm(lin))
    for it in range(_FISTA_MAX_ITERS):
        x_new = project(y - step * grad(y))
        f_new = value(x_new)
        if f_new > f_prev + 1e-16 * (1.0 + abs(f_prev)):
            # Restart the momentum from the last good point.
            y = x.copy()
            t = 1.0
            x_new = project(y - step * grad(y))
            f_new = value(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        pg = float(np.linalg.norm(x_new - project(x_new - step * grad(x_new)))) / step
        x, t, f_prev = x_new, t_new, f_new
        if pg <= grad_tol:
            return x
        if np.linalg.norm(x) > 1e10 * scale:
            raise UnboundednessError("iterates diverged; objective appears unbounded")
    raise NumericalError("FISTA exhausted its iteration budget", residual=pg)


def solve_agent_qp(agent: AgentModel, lin_extra: np.ndarray | None = None,
                   quad_extra: np.ndarray | None = None,
                   x0: np.ndarray | None = None) -> np.ndarray:
    """Minimize u'(Q+quad_extra)u + (q+lin_extra)'u over the admissible set."""
    m = agent.control_dim
    lin = agent.cost_lin.copy()
    if lin_extra is not None:
        lin = lin + lin_extra
    quad = agent.cost_quad
    if quad_extra is not None:
        quad = quad + quad_extra

    d = _diag_of(quad)
    lin_scale = 1.0 + float(np.max(np.abs(lin), initial=0.0))
    eq_is_sum = agent.equality is not None and np.all(agent.equality[0] == 1.0)
    curvature = (np.max(d, initial=0.0) if d is not None
                 else _power_lambda_max(2.0 * quad))
    vanishing = curvature <= 1e-12 * lin_scale

    def _ineq_ok(u):
        if agent.inequalities is None:
            return True
        G, h = agent.inequalities
        return bool(np.all(G @ u <= h + 1e-9 * (1.0 + np.abs(h))))

    if vanishing and (agent.equality is None or eq_is_sum):
        # Vanishing curvature: exact linear solve with min-norm tie-breaking.
        if agent.equality is None:
            u = _lp_box(lin, agent.box_lower, agent.box_upper)
        else:
            u = _lp_box_sum(lin, agent.box_lower, agent.box_upper, agent.equality[1])
        if _ineq_ok(u):
            return u

    if (not vanishing and d is not None and np.min(d) > 0.0
            and (agent.equality is None or eq_is_sum)):
        # Exact separable path: stationarity u = (-lin - tau)/(2 d), clipped.
        if agent.equality is None:
            u = np.clip(-lin / (2.0 * d), agent.box_lower, agent.box_upper)
        else:
            u = _diag_qp_box_sum_rows(
                d[None, :], lin[None, :], agent.box_lower[None, :],
                agent.box_upper[None, :], np.array([agent.equality[1]])
            )[0]
        if _ineq_ok(u):
            return u

    # General path: FISTA with the full feasibility projection.
    quad_eff = quad
    if vanishing:
        quad_eff = quad + 1e-9 * lin_scale * np.eye(m)
    if x0 is None:
        x0 = 0.5 * (
            np.where(np.isfinite(agent.box_lower), agent.box_lower, 0.0)
            + np.where(np.isfinite(agent.box_upper), agent.box_upper, 0.0)
        )
    grad_tol = 1e-9 * (1.0 + float(np.linalg.norm(lin)))
    return _fista(quad_eff, lin, lambda v: project_feasible(agent, v), x0, grad_tol)


def _diag_qp_box_sum_rows(d, lin, lo, hi, gamma) -> np.ndarray:
    """Rowwise min sum(d u^2 + lin u) s.t. box, sum u = gamma (d > 0)."""
    v = -lin / (2.0 * d)
    # u = clip(v - tau/(2d), lo, hi): substitute s = tau and bisect on s.
    t_lo = (2.0 * d * (v - hi)).min(axis=1)
    t_hi = (2.0 * d * (v - lo)).max(axis=1)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))

    sum_lo = np.broadcast_to(lo, v.shape).sum(axis=1)
    sum_hi = np.broadcast_to(hi, v.shape).sum(axis=1)
    bad = (gamma < sum_lo - 1e-9 * (1 + np.abs(gamma))) | (
        gamma > sum_hi + 1e-9 * (1 + np.abs(gamma))
    )
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise InfeasibilityError(
            f"sum target {gamma[idx]:.6g} outside [{sum_lo[idx]:.6g}, {sum_hi[idx]:.6g}]"
        )

    tol = 1e-12 * np.maximum(1.0, np.abs(gamma))
    tau = 0.5 * (t_lo + t_hi)
    for _ in range(2 * _KNAPSACK_MAX_ITERS):
        u = np.clip(v - tau[:, None] / (2.0 * d), lo, hi)
        resid = u.sum(axis=1) - gamma
        if np.all(np.abs(resid) <= tol):
            break
        too_big = resid > 0.0
        t_lo = np.where(too_big, tau, t_lo)
        t_hi = np.where(too_big, t_hi, tau)
        tau = 0.5 * (t_lo + t_hi)
    return np.clip(v - tau[:, None] / (2.0 * d), lo, hi)


# ---------------------------------------------------------------------------
# Best responses
# ---------------------------------------------------------------------------

def _price_linear_term(agent: AgentModel, y: Trajectory, pair_with: str) -> np.ndarray:
    w = agent.space.weights
    wy = w * y.values
    if pair_with == "control":
        return wy
    return agent.state_matrix.T @ wy


def best_response(agent: AgentModel, y: Trajectory, pair_with: str = "state",
                  x0: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of E(V_i + y . exposure) over the admissible set.

    ``pair_with`` selects whether the price multiplies the expected state
    (the default) or the control itself, matching the coupling target of the
    game the agent belongs to.  The mean-field cost of the population term is
    a constant at this level and never enters.
    """
    if pair_with not in ("state", "control"):
        raise UsageError("pair_with must be 'state' or 'control'")
    if pair_with == "control" and agent.control_dim != agent.space.dim:
        raise DimensionMismatchError("control pairing needs control dim == space dim")
    lin_extra = _price_linear_term(agent, y, pair_with)
    return solve_agent_qp(agent, lin_extra=lin_extra, x0=x0)


def br_objective(agent: AgentModel, y: Trajectory, u: np.ndarray,
                 pair_with: str = "state") -> float:
    """Value of the best-response objective E(V_i + y . exposure) at u."""
    u = np.asarray(u, dtype=float)
    expo = u if pair_with == "control" else agent.expected_state_values(u)
    return agent.private_cost(u) + agent.space.dot(y.values, expo)


def decoupled_optima(game: GameInstance, plan=None) -> list[np.ndarray]:
    """Best responses against a zero price: each agent's private optimum."""
    zero = game.space.zero()
    return batch_best_response(game, zero, plan=plan)


# ---------------------------------------------------------------------------
# Batched solves over a population
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    """Row-stacked data for populations that admit the exact diagonal path."""

    d: np.ndarray            # (N, m) strictly positive diagonals (or zeros -> LP)
    lin: np.ndarray          # (N, m) private linear costs
    lo: np.ndarray           # (N, m)
    hi: np.ndarray           # (N, m)
    gamma: np.ndarray | None  # (N,) when every agent has a unit-row equality
    state_stack: np.ndarray | None  # (N, T, m) state matrices, None if identity


def make_batch_plan(game: GameInstance) -> BatchPlan | None:
    agents = game.agents
    m = agents[0].control_dim
    diags = []
    for a in agents:
        if a.control_dim != m:
            return None
        d = _diag_of(a.cost_quad)
        if d is None:
            return None
        diags.append(d)
        if a.equality is not None and not np.all(a.equality[0] == 1.0):
            return None
    has_eq = [a.equality is not None for a in agents]
    if any(has_eq) != all(has_eq):
        return None
    identity = game.coupling.target == CONTROL_MEAN or all(
        a.state_matrix.shape == (game.space.dim, m)
        and np.array_equal(a.state_matrix, np.eye(game.space.dim))
        for a in agents
    )
    return BatchPlan(
        d=np.stack(diags),
        lin=np.stack([a.cost_lin for a in agents]),
        lo=np.stack([a.box_lower for a in agents]),
        hi=np.stack([a.box_upper for a in agents]),
        gamma=np.array([a.equality[1] for a in agents]) if all(has_eq) else None,
        state_stack=None if identity else np.stack([a.state_matrix for a in agents]),
    )


def _batch_price_terms(game: GameInstance, plan: BatchPlan, y: Trajectory) -> np.ndarray:
    w = game.space.weights
    wy = w * y.values
    if game.coupling.target == CONTROL_MEAN:
        return np.broadcast_to(wy, plan.lin.shape).copy()
    if plan.state_stack is None:
        return np.broadcast_to(wy, plan.lin.shape).copy()
    return np.einsum("ntm,t->nm", plan.state_stack, wy)


def batch_solve_qp(game: GameInstance, plan: BatchPlan, lin_extra: np.ndarray,
                   quad_extra_diag: np.ndarray | float | None = None) -> np.ndarray:
    """Rowwise exact diagonal QP over the population, with fallbacks.

    Rows whose solution violates an agent's extra halfspaces are re-solved
    individually through the general path.
    """
    lin = plan.lin + lin_extra
    d = plan.d.copy()
    if quad_extra_diag is not None:
        d = d + quad_extra_diag
    lin_scale = 1.0 + np.max(np.abs(lin), axis=1)
    lp_rows = np.max(d, axis=1) <= 1e-12 * lin_scale

    out = np.zeros_like(lin)
    qp_rows = ~lp_rows
    if np.any(qp_rows):
        if plan.gamma is not None:
            out[qp_rows] = _diag_qp_box_sum_rows(
                d[qp_rows], lin[qp_rows], plan.lo[qp_rows], plan.hi[qp_rows],
                plan.gamma[qp_rows],
            )
        else:
            out[qp_rows] = np.clip(-lin[qp_rows] / (2.0 * d[qp_rows]),
                                   plan.lo[qp_rows], plan.hi[qp_rows])
    for i in np.flatnonzero(lp_rows):
        if plan.gamma is not None:
            out[i] = _lp_box_sum(lin[i], plan.lo[i], plan.hi[i], float(plan.gamma[i]))
        else:
            out[i] = _lp_box(lin[i], plan.lo[i], plan.hi[i])

    for i, agent in enumerate(game.agents):
        if agent.inequalities is not None:
            G, h = agent.inequalities
            if not np.all(G @ out[i] <= h + 1e-9 * (1.0 + np.abs(h))):
                extra = None
                if quad_extra_diag is not None:
                    row = (quad_extra_diag[i] if np.ndim(quad_extra_diag) == 2
                           else quad_extra_diag)
                    extra = np.diag(np.broadcast_to(row, (agent.control_dim,)))
                out[i] = solve_agent_qp(agent, lin_extra=lin_extra[i], quad_extra=extra)
    return out


def batch_best_response(game: GameInstance, y: Trajectory,
                        plan: BatchPlan | None = None) -> list[np.ndarray]:
    """Best responses of every agent against a common price trajectory."""
    if plan is None:
        plan = make_batch_plan(game)
    pair = "control" if game.coupling.target == CONTROL_MEAN else "state"
    if plan is not None:
        lin_extra = _batch_price_terms(game, plan, y)
        U = batch_solve_qp(game, plan, lin_extra)
        return [U[i] for i in range(game.n)]
    workers = _thread_count()
    if workers > 1 and game.n > 3:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda a: best_response(a, y, pair), game.agents))
    return [best_response(a, y, pair) for a in game.agents]


# ---------------------------------------------------------------------------
# Deviation best response against fixed opponents
# ---------------------------------------------------------------------------

def best_response_full(game: GameInstance, i: int,
                       u_others: Sequence[np.ndarray]) -> np.ndarray:
    """Optimal deviation of agent i with every other control held fixed.

    Unlike :func:`best_response`, the full cost is minimized, including the
    deviator's own 1/N influence on the population mean.  Affine couplings
    with quadratic mean costs reduce to an exact quadratic program; other
    couplings run projected gradient with backtracking on the exact cost.
    """
    if not 0 <= i < game.n:
        raise UsageError(f"agent index {i} out of range")
    agent = game.agents[i]
    n = game.n
    others = [np.asarray(u, dtype=float) for u in u_others]
    if len(others) != n:
        raise DimensionMismatchError("u_others must list one control per agent")

    acc = np.zeros(game.space.dim)
    for j, u in enumerate(others):
        if j != i:
            acc = acc + game.exposure_values(j, u)
    m_rest = acc / n

    B = game.exposure_matrix(i)
    offset = (np.zeros(game.space.dim) if game.coupling.target == CONTROL_MEAN
              else agent.state_offset.values)
    w = game.space.weights
    space = game.space

    if game.coupling.affine and game.mf_cost.quadratic:
        z_ref = space.wrap(m_rest + offset / n)
        J = game.coupling.jacobian_at(z_ref)
        F_ref = game.coupling(z_ref).values
        HG = game.mf_cost.euclidean_hessian(z_ref)
        gG = w * game.mf_cost.grad(z_ref).values

        WJ = w[:, None] * J
        quad_extra = B.T @ ((WJ + WJ.T) / (2.0 * n) + HG / (2.0 * n * n)) @ B
        lin_extra = B.T @ (w * F_ref + (WJ.T @ offset) / n + gG / n)
        return solve_agent_qp(agent, lin_extra=lin_extra,
                              quad_extra=0.5 * (quad_extra + quad_extra.T))

    def mean_at(u):
        return space.wrap(m_rest + (B @ u + offset) / n)

    def cost(u):
        zz = mean_at(u)
        expo = B @ u + offset
        return (agent.private_cost(u) + space.dot(game.coupling(zz).values, expo)
                + game.mf_cost.value(zz))

    def grad(u):
        zz = mean_at(u)
        expo = B @ u + offset
        F = game.coupling(zz).values
        JF = game.coupling.jacobian_at(zz)
        gG = w * game.mf_cost.grad(zz).values
        return (2.0 * agent.cost_quad @ u + agent.cost_lin
                + B.T @ (w * F)
                + B.T @ (JF.T @ (w * expo)) / n
                + B.T @ gG / n)

    u = project_feasible(agent, np.asarray(others[i], dtype=float))
    # Curvature bound from sampled gradient differences, with safety margin.
    g0 = grad(u)
    lip = _power_lambda_max(2.0 * agent.cost_quad)
    rng = np.random.default_rng(2718)
    for _ in range(4):
        d = rng.standard_normal(u.size)
        d /= max(float(np.linalg.norm(d)), 1e-300)
        h = 1e-4 * (1.0 + float(np.linalg.norm(u)))
        lip = max(lip, float(np.linalg.norm(grad(u + h * d) - g0)) / h)
    step = 1.0 / (4.0 * lip + 1e-12)

    grad_tol = 1e-9 * (1.0 + float(np.linalg.norm(agent.cost_lin)))
    f = cost(u)
    stall = 0
    for _ in range(20_000):
        g = grad(u)
        cand = project_feasible(agent, u - step * g)
        f_cand = cost(cand)
        if f_cand > f + 1e-15 * (1.0 + abs(f)):
            # Curvature estimate was optimistic; shrink permanently.
            step *= 0.5
            if step < 1e-14:
                break
            continue
        pg = float(np.linalg.norm(u - cand)) / step
        stall = stall + 1 if f - f_cand <= 1e-15 * (1.0 + abs(f)) else 0
        u, f = cand, f_cand
        if pg <= grad_tol or stall >= 30:  # converged or float plateau
            break
    return u
