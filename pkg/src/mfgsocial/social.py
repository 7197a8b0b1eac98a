"""The constructed social-welfare problem, its dual machinery, and oracles.

The constructed problem couples the agents' private costs to one extra
"supplier" decision z through the balance constraint (mean exposure = z):

    minimize  sum_i V_i(u_i) + phi(z)   s.t.  (1/N) sum_i exposure_i = z

with phi from :func:`mfgsocial.model.build_virtual_cost`.  This module
evaluates the objective, the Lagrangian, the dual function, and solves the
reduced problem directly by accelerated projected gradient; the direct
solver is kept independent of the equilibrium algorithms so it can act as
the oracle side of equivalence checks.  The classical welfare (plain sum of
the individual costs) lives here too, for efficiency-gap reporting only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bestresponse import (
    batch_best_response,
    br_objective,
    decoupled_optima,
    make_batch_plan,
    project_feasible,
)
from .equilibrium import SolverConfig, _solve_z_stationarity
from .errors import NumericalError, UsageError
from .model import CONTROL_MEAN, GameInstance, VirtualCost, build_virtual_cost
from .space import Trajectory

__all__ = [
    "SocialProblem",
    "SocialSolution",
    "social_cost",
    "lagrangian",
    "dual_value",
    "solve_social_direct",
    "duality_gap",
    "classical_social_solve",
    "classical_cost",
]


@dataclass(frozen=True)
class SocialProblem:
    game: GameInstance
    virtual_cost: VirtualCost
    reduced: bool = True

    @classmethod
    def from_game(cls, game: GameInstance,
                  virtual_cost: VirtualCost | None = None) -> "SocialProblem":
        vc = virtual_cost if virtual_cost is not None else build_virtual_cost(
            game.coupling, game.n)
        return cls(game=game, virtual_cost=vc)


@dataclass
class SocialSolution:
    controls: list[np.ndarray]
    z: Trajectory
    value: float
    converged: bool
    iterations: int


def _as_controls(game: GameInstance, u: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(u) != game.n:
        raise UsageError(f"expected {game.n} controls")
    return [np.asarray(ui, dtype=float) for ui in u]


def social_cost(problem: SocialProblem, u: Sequence[np.ndarray],
                z: Trajectory) -> float:
    """Objective of the constructed problem: private costs plus phi(z)."""
    game = problem.game
    u = _as_controls(game, u)
    total = sum(agent.private_cost(ui) for agent, ui in zip(game.agents, u))
    return total + problem.virtual_cost.value(z)


def balance_gap(problem: SocialProblem, u: Sequence[np.ndarray],
                z: Trajectory) -> Trajectory:
    """Constraint value: sum of expected exposures minus N z."""
    game = problem.game
    u = _as_controls(game, u)
    mean = game.aggregate_mean_values(u)
    return game.space.wrap(game.n * (mean - z.values))


def lagrangian(problem: SocialProblem, u: Sequence[np.ndarray], z: Trajectory,
               lam: Trajectory) -> float:
    """Social cost plus the multiplier paired with the balance constraint."""
    g = balance_gap(problem, u, z)
    return social_cost(problem, u, z) + problem.game.space.dot(lam.values, g.values)


def dual_value(problem: SocialProblem, lam: Trajectory) -> float:
    """Dual function: decoupled agent minima plus the supplier minimum.

    Returns -inf when the supplier subproblem min phi(z) - N lam . z is
    unbounded below (bounded phi with a nonzero multiplier, for instance).
    """
    game = problem.game
    vc = problem.virtual_cost
    pair = "control" if game.coupling.target == CONTROL_MEAN else "state"
    responses = batch_best_response(game, lam)
    agents_part = sum(
        br_objective(agent, lam, mu, pair)
        for agent, mu in zip(game.agents, responses)
    )

    if vc.argmin_shifted is not None:
        res = vc.argmin_shifted(lam)
        if res is None:
            return -math.inf
        z, value = res
        return agents_part + value

    try:
        z_vals = _solve_z_stationarity(vc, lam.values)
    except NumericalError:
        return -math.inf
    space = game.space
    z = space.wrap(z_vals)

    def shifted(zz: Trajectory) -> float:
        return vc.value(zz) - vc.n * space.dot(lam.values, zz.values)

    best = shifted(z)
    # Boundedness probe: a stationary point of a non-convex phi may sit above
    # an unbounded valley, so sample far along a few rays.
    scale = 1.0 + space.norm(z.values)
    directions = [np.ones(space.dim)]
    if space.norm(lam.values) > 0:
        directions.append(lam.values / space.norm(lam.values))
    for d in directions:
        for mag in (1e2, 1e4, 1e6):
            for sgn in (1.0, -1.0):
                probe = space.wrap(z.values + sgn * mag * scale * d)
                if shifted(probe) < best - 1e-9 * (1.0 + abs(best)):
                    return -math.inf
    return agents_part + best


def duality_gap(problem: SocialProblem, u: Sequence[np.ndarray], z: Trajectory,
                lam: Trajectory) -> float:
    """Primal value minus dual value; near zero certifies strong duality."""
    d = dual_value(problem, lam)
    p = social_cost(problem, u, z)
    if d == -math.inf:
        return math.inf
    return p - d


# ---------------------------------------------------------------------------
# Direct solver for the reduced problem (the equivalence oracle)
# ---------------------------------------------------------------------------

def _batch_project(game: GameInstance, plan, V: list[np.ndarray]) -> list[np.ndarray]:
    if plan is not None:
        from .bestresponse import _bisect_box_sum

        stacked = np.stack(V)
        if plan.gamma is not None:
            out = _bisect_box_sum(stacked, plan.lo, plan.hi, plan.gamma)
        else:
            out = np.clip(stacked, plan.lo, plan.hi)
        result = [out[i] for i in range(game.n)]
        for i, agent in enumerate(game.agents):
            if agent.inequalities is not None:
                G, h = agent.inequalities
                if not np.all(G @ result[i] <= h + 1e-9 * (1.0 + np.abs(h))):
                    result[i] = project_feasible(agent, V[i])
        return result
    return [project_feasible(agent, v) for agent, v in zip(game.agents, V)]


def _reduced_gradient(game: GameInstance, u: list[np.ndarray]):
    """Gradient blocks of sum V_i + phi(mean exposure) and the mean itself."""
    mean = game.aggregate_mean(u)
    price = game.coupling(mean).values
    w = game.space.weights
    grads = []
    for i, agent in enumerate(game.agents):
        B = game.exposure_matrix(i)
        if game.coupling.target == CONTROL_MEAN:
            lin = w * price
        else:
            lin = B.T @ (w * price)
        grads.append(2.0 * agent.cost_quad @ u[i] + agent.cost_lin + lin)
    return grads, mean


def _gradient_lipschitz_bound(game: GameInstance, classical: bool = False) -> float:
    from .bestresponse import _power_lambda_max

    quad = max(_power_lambda_max(2.0 * a.cost_quad) for a in game.agents)
    w = game.space.weights
    expo = 0.0
    for i in range(game.n):
        B = game.exposure_matrix(i)
        expo = max(expo, _power_lambda_max(B.T @ (w[:, None] * B)))
    coupling_curv = game.coupling.lipschitz
    if classical:
        # The coupling enters twice (own exposure and the Jacobian-transpose
        # term) and the mean cost contributes its gradient Lipschitz bound.
        coupling_curv = 2.0 * game.coupling.lipschitz + game.mf_cost.grad_lipschitz
    return quad + coupling_curv * expo + 1e-12


def _fista_over_population(game, plan, grad_fn, value_fn, step, max_iters,
                           pg_tol) -> tuple[list[np.ndarray], bool, int]:
    """Accelerated projected gradient over all agents' controls jointly."""
    u = decoupled_optima(game, plan=plan)
    x = u
    y = [ui.copy() for ui in u]
    t = 1.0
    f_best = value_fn(x)
    best = x
    converged = False
    iterations = 0
    for k in range(1, max_iters + 1):
        grads = grad_fn(y)
        x_new = _batch_project(game, plan, [yi - step * gi for yi, gi in zip(y, grads)])
        f_new = value_fn(x_new)
        if f_new > f_best + 1e-14 * (1.0 + abs(f_best)):
            y = [xi.copy() for xi in x]
            t = 1.0
            grads = grad_fn(y)
            x_new = _batch_project(game, plan,
                                   [yi - step * gi for yi, gi in zip(y, grads)])
            f_new = value_fn(x_new)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = [xn + ((t - 1.0) / t_new) * (xn - xo) for xn, xo in zip(x_new, x)]
        x, t = x_new, t_new
        if f_new < f_best:
            f_best, best = f_new, x_new
        grads_x = grad_fn(x)
        moved = _batch_project(game, plan,
                               [xi - step * gi for xi, gi in zip(x, grads_x)])
        pg_norm = math.sqrt(sum(float(np.linalg.norm(a - b) ** 2)
                                for a, b in zip(x, moved))) / step
        iterations = k
        if pg_norm <= pg_tol:
            converged = True
            break
    return best, converged, iterations


def solve_social_direct(problem: SocialProblem,
                        config: SolverConfig) -> SocialSolution:
    """Projected-gradient (FISTA) solve of the reduced constructed problem.

    Eliminates z through the balance constraint and minimizes over the
    controls only; the gradient of the phi term against agent i's control is
    the weight-adjusted adjoint of its exposure applied to F(mean).  Budget
    exhaustion returns the best iterate with converged=False.
    """
    game = problem.game
    plan = make_batch_plan(game)
    step = 1.0 / _gradient_lipschitz_bound(game)

    def value_at(controls):
        mean = game.aggregate_mean(controls)
        return social_cost(problem, controls, mean)

    best, converged, iterations = _fista_over_population(
        game, plan, lambda u: _reduced_gradient(game, u)[0], value_at,
        step, max(config.max_iters, 200) * 10, pg_tol=1e-8,
    )
    mean = game.aggregate_mean(best)
    return SocialSolution(controls=best, z=mean, value=value_at(best),
                          converged=converged, iterations=iterations)


# ---------------------------------------------------------------------------
# Classical welfare (sum of the raw individual costs)
# ---------------------------------------------------------------------------

def classical_cost(game: GameInstance, u: Sequence[np.ndarray]) -> float:
    """Sum of all agents' full costs at a profile (deterministic part)."""
    u = _as_controls(game, u)
    mean = game.aggregate_mean(u)
    price = game.coupling(mean).values
    total = 0.0
    for i, agent in enumerate(game.agents):
        expo = game.exposure_values(i, u[i])
        total += agent.private_cost(u[i]) + game.space.dot(price, expo)
    total += game.n * game.mf_cost.value(mean)
    return total


def _classical_gradient(game: GameInstance, u: list[np.ndarray]):
    mean = game.aggregate_mean(u)
    w = game.space.weights
    price = game.coupling(mean).values
    JF = game.coupling.jacobian_at(mean)
    grad_G = game.mf_cost.grad(mean).values
    shared = w * price + JF.T @ (w * mean.values) + w * grad_G
    grads = []
    for i, agent in enumerate(game.agents):
        B = game.exposure_matrix(i)
        if game.coupling.target == CONTROL_MEAN:
            lin = shared
        else:
            lin = B.T @ shared
        grads.append(2.0 * agent.cost_quad @ u[i] + agent.cost_lin + lin)
    return grads


def classical_social_solve(game: GameInstance,
                           config: SolverConfig) -> SocialSolution:
    """Minimize the plain sum of individual costs over all controls jointly.

    Accelerated projected gradient; the coupling's Jacobian-transpose term
    enters every agent's block (finite differences when no closed form is
    declared).  Used for efficiency-gap reporting only.
    """
    plan = make_batch_plan(game)
    step = 1.0 / _gradient_lipschitz_bound(game, classical=True)
    best, converged, iterations = _fista_over_population(
        game, plan, lambda u: _classical_gradient(game, u),
        lambda u: classical_cost(game, u),
        step, max(config.max_iters, 200) * 10, pg_tol=1e-8,
    )
    mean = game.aggregate_mean(best)
    return SocialSolution(controls=best, z=mean, value=classical_cost(game, best),
                          converged=converged, iterations=iterations)
