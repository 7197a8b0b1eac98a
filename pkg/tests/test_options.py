"""Smaller contract knobs: threads, solver variants, noise plumbing."""

import os
from dataclasses import replace

import numpy as np
import pytest

from mfgsocial.bestresponse import batch_best_response, make_batch_plan
from mfgsocial.cases import sine_game
from mfgsocial.cli import main
from mfgsocial.equilibrium import solve_admm, solve_fixed_point, solve_primal_dual
from mfgsocial.model import AgentModel, Coupling, GameInstance, NoiseSpec, state_of, zero_mean_field_cost
from mfgsocial.space import unit_space


def _dense_q_game(n=6, dim=3, seed=0):
    sp = unit_space(dim)
    rng = np.random.default_rng(seed)
    agents = []
    for _ in range(n):
        M = rng.standard_normal((dim, dim))
        Q = M @ M.T + 0.5 * np.eye(dim)   # dense SPD: no diagonal fast path
        agents.append(AgentModel(space=sp, state_matrix=np.eye(dim),
                                 state_offset=sp.zero(), cost_quad=Q,
                                 cost_lin=rng.uniform(-1, 1, dim),
                                 box_lower=-np.ones(dim),
                                 box_upper=np.ones(dim)))
    coupling = Coupling(space=sp, map=lambda z: sp.wrap(0.2 * z.values),
                        lipschitz=0.2, monotone=True, affine=True,
                        pointwise=True, jacobian=lambda z: 0.2 * np.eye(dim))
    return GameInstance(agents=tuple(agents), coupling=coupling,
                        mf_cost=zero_mean_field_cost(sp), space=sp)


def test_dense_cost_population_has_no_batch_plan_and_threads_agree():
    game = _dense_q_game()
    assert make_batch_plan(game) is None
    y = game.space.wrap(np.linspace(-0.5, 0.5, game.space.dim))
    serial = batch_best_response(game, y)
    old = os.environ.get("MFG_THREADS")
    os.environ["MFG_THREADS"] = "4"
    try:
        threaded = batch_best_response(game, y)
    finally:
        if old is None:
            del os.environ["MFG_THREADS"]
        else:
            os.environ["MFG_THREADS"] = old
    for a, b in zip(serial, threaded):
        assert np.array_equal(a, b)


def test_dense_cost_game_solves_through_generic_path():
    game = _dense_q_game()
    from mfgsocial.equilibrium import SolverConfig, StepSchedule

    # Weak coupling: the plain fixed-point map already contracts.
    cfg = SolverConfig(max_iters=200, tol=1e-8,
                       step=StepSchedule("constant", 1.0))
    res = solve_fixed_point(game, cfg)
    assert res.converged
    assert res.final_mf_residual <= 1e-6


def test_primal_dual_stale_z_ordering_variant(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-6, max_iters=8000)
    printed = solve_primal_dual(game, cfg, virtual_cost=small_ev.virtual_cost)
    alt = solve_primal_dual(game, replace(cfg, dual_step_uses_stale_z=True),
                            virtual_cost=small_ev.virtual_cost)
    assert printed.converged and alt.converged
    rel = (np.linalg.norm(printed.z_star.values - alt.z_star.values)
           / (1 + np.linalg.norm(printed.z_star.values)))
    assert rel <= 1e-4  # both orderings settle on the same equilibrium


def test_admm_residual_balancing_still_converges(small_ev):
    game = small_ev.game
    cfg = replace(small_ev.solver_defaults, tol=1e-6, max_iters=4000,
                  residual_balancing=True, admm_penalty=8.0)
    res = solve_admm(game, cfg, virtual_cost=small_ev.virtual_cost)
    assert res.converged
    assert res.final_mf_residual <= 10 * cfg.tol


def test_state_of_with_noise_sample_is_pure():
    sp = unit_space(3)
    agent = AgentModel(space=sp, state_matrix=np.eye(3),
                       state_offset=sp.wrap([1.0, 1.0, 1.0]),
                       cost_quad=np.eye(3), cost_lin=np.zeros(3),
                       box_lower=np.zeros(3), box_upper=np.ones(3))
    sample = np.array([0.1, -0.2, 0.3])
    a = state_of(agent, [0.5, 0.5, 0.5], noise_sample=sample)
    b = state_of(agent, [0.5, 0.5, 0.5], noise_sample=sample)
    assert np.array_equal(a.values, b.values)
    assert np.allclose(a.values, [1.6, 1.3, 1.8])


def test_noise_spec_sampling_statistics():
    spec = NoiseSpec(kind="truncated-gaussian", scale=0.5, clip=2.5,
                     second_moment=10.0)
    rng = np.random.default_rng(0)
    draws = spec.sample(rng, 200_000)
    assert np.max(np.abs(draws)) <= 0.5 * 2.5 + 1e-12
    assert abs(float(draws.mean())) <= 5e-3
    assert float(draws.var()) == pytest.approx(spec.coordinate_variance(), rel=0.02)
    uni = NoiseSpec(kind="uniform", scale=0.9, second_moment=10.0)
    assert uni.coordinate_variance() == pytest.approx(0.27)


def test_cli_verify_supercritical_sine_exits_3(tmp_path):
    code = main(["verify", "--case", "sine", "--kappa", "3.0",
                 "--max-iters", "150", "--out-dir", str(tmp_path)])
    assert code == 3


def test_step_scale_survives_non_unit_weights():
    # Picard on the discounted grid still contracts when weights vary by
    # orders of magnitude across the horizon.
    bundle = sine_game(kappa=1.9, rho=2.0, dt=0.1, n=3)
    game = bundle.game
    cfg = replace(bundle.solver_defaults, z0=game.space.ones(), max_iters=2000)
    res = solve_fixed_point(game, cfg)
    assert res.converged
    assert game.space.norm(res.z_star.values) <= 1e-8


def test_threaded_replications_match_sequential():
    import os

    from mfgsocial.cases import lemma_rate_family
    from mfgsocial.verify import lemma2_rate

    fam = lemma_rate_family("quad-cost")
    seq = lemma2_rate(fam, [16, 64, 256], 120, seed=5)
    os.environ["MFG_THREADS"] = "4"
    try:
        par = lemma2_rate(fam, [16, 64, 256], 120, seed=5)
    finally:
        del os.environ["MFG_THREADS"]
    assert seq.values == par.values
    assert seq.slope == par.slope
