from dataclasses import replace

import numpy as np
import pytest

from mfgsocial.cases import sine_game
from mfgsocial.equilibrium import (
    SolverConfig,
    StepSchedule,
    mf_residual,
    residual_history_to_csv,
    solve_admm,
    solve_fixed_point,
    solve_primal_dual,
)
from mfgsocial.errors import UsageError
from mfgsocial.model import Coupling, GameInstance, zero_mean_field_cost
from mfgsocial.space import unit_space


def test_step_schedule_validation():
    with pytest.raises(UsageError):
        StepSchedule("diminishing", 1.0, 1.5)  # steps would be summable
    with pytest.raises(UsageError):
        StepSchedule("diminishing", 0.0)
    with pytest.raises(UsageError):
        StepSchedule("sqrt", 1.0)
    s = StepSchedule("diminishing", 1.0, 1.0)
    assert s(4) == 0.25
    assert StepSchedule("constant", 0.3)(17) == 0.3


def _zero_coupling_game(n=6, dim=4, seed=0):
    from mfgsocial.model import AgentModel

    sp = unit_space(dim)
    rng = np.random.default_rng(seed)
    agents = tuple(
        AgentModel(space=sp, state_matrix=np.eye(dim), state_offset=sp.zero(),
                   cost_quad=np.diag(rng.uniform(0.5, 2.0, dim)),
                   cost_lin=rng.uniform(-1, 1, dim),
                   box_lower=-np.ones(dim), box_upper=np.ones(dim))
        for _ in range(n)
    )
    coupling = Coupling(space=sp, map=lambda z: sp.zero(), lipschitz=0.0,
                        monotone=True, affine=True, pointwise=True,
                        jacobian=lambda z: np.zeros((dim, dim)))
    return GameInstance(agents=agents, coupling=coupling,
                       mf_cost=zero_mean_field_cost(sp), space=sp)


def test_zero_coupling_converges_immediately_to_decoupled_optima():
    game = _zero_coupling_game()
    cfg = SolverConfig(max_iters=50, tol=1e-10)
    res = solve_fixed_point(game, cfg)
    assert res.converged and res.iterations == 1
    for agent, u in zip(game.agents, res.controls):
        expected = np.clip(-agent.cost_lin / (2 * np.diag(agent.cost_quad)), -1, 1)
        assert np.allclose(u, expected, atol=1e-12)


def test_zero_coupling_all_algorithms_within_five_iterations():
    game = _zero_coupling_game()
    cfg = SolverConfig(max_iters=50, tol=1e-8)
    from mfgsocial.model import build_virtual_cost

    vc = build_virtual_cost(game.coupling, game.n)
    for solver in (solve_fixed_point,
                   lambda g, c: solve_primal_dual(g, c, virtual_cost=vc),
                   lambda g, c: solve_admm(g, c, virtual_cost=vc)):
        res = solver(game, cfg)
        assert res.converged and res.iterations <= 5


def test_sine_picard_geometric_contraction():
    bundle = sine_game(kappa=1.5, dt=0.2)
    game = bundle.game
    cfg = replace(bundle.solver_defaults, z0=game.space.ones())
    res = solve_fixed_point(game, cfg)
    assert res.converged
    zn = [game.space.norm(z) for z in res.traces["z"]]
    ratios = [zn[i + 1] / zn[i] for i in range(len(zn) - 1) if zn[i] > 1e-11]
    assert max(ratios) <= 0.75 + 0.05
    assert game.space.norm(res.z_star.values) <= 1e-8


def test_sine_analytic_fixed_point_residual_zero():
    bundle = sine_game(kappa=1.5, dt=0.2, n=4)
    game = bundle.game
    zeros = [np.zeros(game.space.dim) for _ in range(4)]
    assert mf_residual(game, zeros, game.space.zero()) <= 1e-10


def test_mf_residual_positive_for_inconsistent_price(small_ev):
    game = small_ev.game
    us = [np.zeros(game.space.dim) for _ in range(game.n)]
    y = game.space.ones()
    mean = game.aggregate_mean(us)
    expected = game.space.norm(y.values - game.coupling(mean).values)
    assert mf_residual(game, us, y) >= expected > 0


def test_mf_residual_increases_under_perturbation(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-9, max_iters=2000)
    res = solve_admm(game, cfg, virtual_cost=small_ev.virtual_cost)
    base = mf_residual(game, res.controls, res.lambda_star)
    bumped = [u.copy() for u in res.controls]
    bumped[0] = bumped[0].copy()
    # Keep the sum constraint: move mass between two coordinates.
    bumped[0][0] += 0.01
    bumped[0][1] -= 0.01
    assert mf_residual(game, bumped, res.lambda_star) > base


def test_ev_supplier_update_closed_form(default_ev):
    vc = default_ev.virtual_cost
    slope = default_ev.facts["dual_scale"]
    sp = default_ev.game.space
    lam = sp.wrap(np.linspace(-0.5, 0.5, sp.dim))
    z, _ = vc.argmin_shifted(lam)
    assert np.allclose(z.values, lam.values / slope, atol=1e-15)


def test_primal_dual_multiplier_consistency(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-6, max_iters=5000)
    res = solve_primal_dual(game, cfg, virtual_cost=small_ev.virtual_cost)
    assert res.converged
    # grad phi(z*) = N lambda*: with the closed-form supplier step this holds
    # to solver precision.
    grad_phi = small_ev.virtual_cost.grad(res.z_star)
    gap = game.space.norm(grad_phi.values - game.n * res.lambda_star.values)
    assert gap <= 10 * cfg.tol * game.n


def test_admm_multiplier_equals_coupling_at_z(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-8, max_iters=4000)
    res = solve_admm(game, cfg, virtual_cost=small_ev.virtual_cost)
    assert res.converged
    f_at_z = game.coupling(res.z_star)
    assert game.space.norm(res.lambda_star.values - f_at_z.values) <= 1e-10


def test_converged_results_pass_mf_residual_bound(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-5, max_iters=5000)
    for solver in (
        solve_fixed_point,
        lambda g, c: solve_primal_dual(g, c, virtual_cost=small_ev.virtual_cost),
        lambda g, c: solve_admm(g, c, virtual_cost=small_ev.virtual_cost),
    ):
        res = solver(game, cfg)
        assert res.converged
        assert res.final_mf_residual <= 10 * cfg.tol


def test_max_iters_exhaustion_returns_history_not_exception(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-12, max_iters=3)
    res = solve_fixed_point(game, cfg)
    assert not res.converged
    assert res.iterations == 3
    assert len(res.residual_history["iter"]) == 3


def test_identical_configs_reproduce_bitwise_histories(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-6, max_iters=300)
    a = solve_admm(game, cfg, virtual_cost=small_ev.virtual_cost)
    b = solve_admm(game, cfg, virtual_cost=small_ev.virtual_cost)
    assert a.history_array().tobytes() == b.history_array().tobytes()
    m1 = solve_fixed_point(game, cfg)
    m2 = solve_fixed_point(game, cfg)
    assert m1.history_array().tobytes() == m2.history_array().tobytes()


def test_history_csv_schema(tmp_path, small_ev):
    game = small_ev.game
    res = solve_fixed_point(game, replace(small_ev.solver_defaults, max_iters=20))
    path = tmp_path / "hist.csv"
    residual_history_to_csv(res, path)
    header = path.read_text().splitlines()[0]
    assert header == ("iter,du_norm,dz_norm,dlambda_norm,"
                      "mf_residual,primal_residual,dual_residual")


def test_admm_rejects_nonconvex_without_override():
    bundle = sine_game(kappa=1.0, dt=0.25, n=3)
    with pytest.raises(UsageError):
        solve_admm(bundle.game, bundle.solver_defaults,
                   virtual_cost=bundle.virtual_cost)


def test_scaled_step_equivalence_small(small_ev):
    game = small_ev.game
    slope = small_ev.facts["dual_scale"]
    cfg_m = replace(small_ev.solver_defaults, max_iters=30, tol=1e-16,
                    track_mf_residual=False)
    cfg_pd = replace(cfg_m, step=StepSchedule("diminishing", slope, 1.0))
    mann = solve_fixed_point(game, cfg_m)
    pd = solve_primal_dual(game, cfg_pd, virtual_cost=small_ev.virtual_cost)
    diffs = [float(np.max(np.abs(a - b)))
             for a, b in zip(mann.traces["z"][:29], pd.traces["z"][1:30])]
    assert max(diffs) <= 1e-8


def test_iteration_count_ordering_robust_across_seeds():
    from mfgsocial.cases import EvParams, ev_game

    for seed in (1, 42):
        bundle = ev_game(EvParams(), seed=seed)
        cfg = replace(bundle.solver_defaults, tol=1e-4, max_iters=1000)
        mann = solve_fixed_point(bundle.game, cfg)
        admm = solve_admm(bundle.game, cfg, virtual_cost=bundle.virtual_cost)
        assert mann.converged and admm.converged
        assert admm.iterations < mann.iterations <= 200
