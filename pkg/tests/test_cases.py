from dataclasses import replace

import numpy as np
import pytest

from mfgsocial.cases import (
    EV_PERIOD_SECONDS,
    EvParams,
    ev_game,
    log_game,
    routing_game,
    sine_game,
)
from mfgsocial.equilibrium import solve_admm, solve_fixed_point
from mfgsocial.errors import InfeasibilityError, UsageError
from mfgsocial.verify import monotone_check, potential_game_check


# ---------------------------------------------------------------------------
# EV case
# ---------------------------------------------------------------------------

def test_ev_default_shape_and_grid_arithmetic(default_ev):
    game = default_ev.game
    assert game.n == 100
    assert game.space.dim == 36
    # 36 periods x 5 minutes = 3 hours.
    step = game.space.grid[1] - game.space.grid[0]
    assert step == EV_PERIOD_SECONDS == 300.0
    assert game.space.dim * step == 3 * 3600.0


def test_ev_seeded_determinism():
    a = ev_game(EvParams(n=10, horizon=6, demand_range=(1, 2)), seed=9)
    b = ev_game(EvParams(n=10, horizon=6, demand_range=(1, 2)), seed=9)
    for x, y in zip(a.game.agents, b.game.agents):
        assert x.cost_lin.tobytes() == y.cost_lin.tobytes()
        assert x.box_upper.tobytes() == y.box_upper.tobytes()
        assert x.equality[1] == y.equality[1]
    c = ev_game(EvParams(n=10, horizon=6, demand_range=(1, 2)), seed=10)
    assert any(x.equality[1] != y.equality[1]
               for x, y in zip(a.game.agents, c.game.agents))


def test_ev_zero_demand_zero_price_equilibrium_is_zero():
    params = EvParams(n=5, horizon=4, c=0.0, demand_range=(0.0, 0.0))
    bundle = ev_game(params, seed=3)
    res = solve_fixed_point(bundle.game, replace(bundle.solver_defaults,
                                                 tol=1e-12, max_iters=100))
    assert res.converged
    assert max(float(np.max(np.abs(u))) for u in res.controls) <= 1e-10
    assert np.max(np.abs(res.z_star.values)) <= 1e-10


def test_ev_warns_when_eta_not_small():
    with pytest.warns(UserWarning):
        ev_game(EvParams(n=2, horizon=3, eta=0.2, gamma_price=1.0,
                         demand_range=(0.3, 0.5)), seed=1)


def test_ev_infeasible_demand_errors_after_resampling():
    params = EvParams(n=2, horizon=3, demand_range=(50.0, 60.0))
    with pytest.raises(InfeasibilityError):
        ev_game(params, seed=1)


def test_ev_invalid_price_profile_length():
    with pytest.raises(UsageError):
        ev_game(EvParams(n=2, horizon=4, c=np.ones(3),
                         demand_range=(0.3, 0.5)), seed=1)


def test_ev_tiny_instance_matches_social_grid_search():
    # Hand-set two-agent, three-period instance solved against a brute-force
    # grid of the constructed social problem at 1e-2 resolution.
    params = EvParams(
        n=2, horizon=3,
        c=np.array([0.02, 0.08, 0.05]),
        capacity_range=(10.0, 10.0),
        rate_range=(12.0, 12.0),        # u_max = 1.0 kWh per period
        demand_range=(2.0, 2.0),
        soc0_range=(0.0, 0.0),
    )
    bundle = ev_game(params, seed=1)
    game = bundle.game
    res = solve_admm(game, replace(bundle.solver_defaults, tol=1e-10,
                                   max_iters=5000),
                     virtual_cost=bundle.virtual_cost)
    assert res.converged

    # Brute force: u3 = 2 - u1 - u2 per agent; grid both agents jointly.
    grid = np.round(np.arange(0.0, 1.0 + 1e-12, 1e-2), 10)
    g1, g2 = np.meshgrid(grid, grid, indexing="ij")
    g3 = 2.0 - g1 - g2
    feas = (g3 >= -1e-12) & (g3 <= 1.0 + 1e-12)
    pts = np.stack([g1[feas], g2[feas], np.clip(g3[feas], 0, 1)], axis=1)
    eta, gamma = params.eta, params.gamma_price
    c = params.c
    v = eta * np.sum(pts**2, axis=1) + 2 * gamma * pts @ c  # private costs

    best = (np.inf, None, None)
    coeff = 2 * (gamma - eta)  # phi(z) = n (gamma-eta) z'z with n = 2
    for i in range(pts.shape[0]):
        z = 0.5 * (pts[i][None, :] + pts)
        tot = v[i] + v + 2 * (gamma - eta) * np.sum(z * z, axis=1)
        j = int(np.argmin(tot))
        if tot[j] < best[0]:
            best = (tot[j], pts[i], pts[j])
    got = np.concatenate(res.controls)
    oracle = np.concatenate([best[1], best[2]])
    assert np.max(np.abs(got - oracle)) <= 1.5e-2


# ---------------------------------------------------------------------------
# Sine case
# ---------------------------------------------------------------------------

def test_sine_requires_positive_kappa():
    with pytest.raises(UsageError):
        sine_game(kappa=0.0)
    with pytest.raises(UsageError):
        sine_game(kappa=-1.0)


def test_sine_default_horizon_reaches_discount_floor():
    bundle = sine_game(kappa=1.0, rho=1.0, dt=0.1)
    w = bundle.game.space.weights
    assert w[-1] / w[0] < 1e-7


def test_sine_facts_and_one_step_convergence_for_tiny_kappa():
    bundle = sine_game(kappa=1e-9, dt=0.25, n=3)
    res = solve_fixed_point(bundle.game, replace(bundle.solver_defaults,
                                                 tol=1e-8, max_iters=50))
    assert res.converged and res.iterations == 1
    assert bundle.facts["unique"]


def test_sine_identity_dynamics():
    bundle = sine_game(kappa=1.0, dt=0.25, n=2)
    agent = bundle.game.agents[0]
    assert np.array_equal(agent.state_matrix, np.eye(bundle.game.space.dim))
    assert np.all(agent.box_upper == 1e6)
    assert np.all(agent.box_lower == -1e6)


# ---------------------------------------------------------------------------
# Routing case
# ---------------------------------------------------------------------------

PIGOU = {"vertices": [0, 1], "edges": [(0, 1, 0.0, 1.0), (0, 1, 1.0, 0.0)]}


def test_routing_two_equal_edges_split_evenly():
    graph = {"vertices": [0, 1], "edges": [(0, 1, 1.0, 0.0), (0, 1, 1.0, 0.0)]}
    bundle = routing_game(graph, [(0, 1, 1.0)])
    res = solve_admm(bundle.game, replace(bundle.solver_defaults, tol=1e-9,
                                          max_iters=3000),
                     virtual_cost=bundle.virtual_cost)
    assert res.converged
    assert np.allclose(res.controls[0], [0.5, 0.5], atol=1e-6)


def test_routing_pigou_matches_flow_grid_oracle():
    bundle = routing_game(PIGOU, [(0, 1, 0.5), (0, 1, 0.5)])
    res = solve_admm(bundle.game, replace(bundle.solver_defaults, tol=1e-9,
                                          max_iters=4000),
                     virtual_cost=bundle.virtual_cost)
    assert res.converged
    edge_flows = bundle.game.n * res.z_star.values

    # Brute force over total flow on the congestible edge at 1e-3 steps,
    # minimizing the congestion potential.
    f2 = np.arange(0.0, 1.0 + 1e-12, 1e-3)
    potential = (1.0 - f2) * 1.0 + 0.5 * f2**2
    oracle_f2 = f2[int(np.argmin(potential))]
    assert abs(edge_flows[1] - oracle_f2) <= 1e-3
    assert abs(edge_flows[0] - (1.0 - oracle_f2)) <= 1e-3


def test_routing_affine_costs_are_monotone():
    bundle = routing_game(PIGOU, [(0, 1, 0.5), (0, 1, 0.5)])
    rep = monotone_check(bundle.game.coupling, bundle.game.space, seed=0)
    assert rep.is_monotone


def test_routing_disconnected_commodity_rejected():
    graph = {"vertices": [0, 1, 2], "edges": [(0, 1, 1.0, 0.0)]}
    with pytest.raises(InfeasibilityError):
        routing_game(graph, [(0, 2, 1.0)])


def test_routing_path_cap():
    # A ladder of parallel pairs multiplies simple paths: 2^7 = 128 > 100.
    edges = []
    for i in range(7):
        edges.append((i, i + 1, 1.0, 0.0))
        edges.append((i, i + 1, 1.0, 0.1))
    graph = {"vertices": list(range(8)), "edges": edges}
    with pytest.raises(UsageError):
        routing_game(graph, [(0, 7, 1.0)])


# ---------------------------------------------------------------------------
# Log case
# ---------------------------------------------------------------------------

def test_log_game_structure_and_checks():
    bundle = log_game(4)
    game = bundle.game
    assert game.space.dim == 1
    assert not potential_game_check(game, samples=3, seed=0).is_potential
    assert monotone_check(game.coupling, game.space, seed=0).is_monotone


def test_log_game_needs_two_agents():
    with pytest.raises(UsageError):
        log_game(1)


def test_log_game_equilibrium_at_one():
    bundle = log_game(5)
    res = solve_fixed_point(bundle.game, replace(bundle.solver_defaults,
                                                 tol=1e-12, max_iters=200))
    assert res.converged
    assert res.z_star.values[0] == pytest.approx(1.0, abs=1e-10)
    for u in res.controls:
        assert u[0] == pytest.approx(1.0, abs=1e-10)


def test_every_bundle_game_constructs_cleanly(small_ev):
    # Construction-time invariants ran during the fixtures; spot-check fields.
    for bundle in (small_ev, sine_game(kappa=1.5, dt=0.25, n=3), log_game(3)):
        game = bundle.game
        assert game.n >= 1
        assert all(a.control_dim >= 1 for a in game.agents)
