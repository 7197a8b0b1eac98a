"""Acceptance suite: one test per release criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from mfgsocial.bestresponse import best_response, knapsack_project
from mfgsocial.cases import (
    EvParams,
    ev_game,
    ev_rate_game,
    lemma_rate_family,
    log_game,
    routing_game,
    sine_game,
)
from mfgsocial.cli import main
from mfgsocial.equilibrium import (
    StepSchedule,
    solve_admm,
    solve_fixed_point,
    solve_primal_dual,
)
from mfgsocial.model import AgentModel
from mfgsocial.social import (
    SocialProblem,
    classical_cost,
    classical_social_solve,
    duality_gap,
    social_cost,
    solve_social_direct,
)
from mfgsocial.space import unit_space
from mfgsocial.verify import (
    epsilon_rate_study,
    equivalence_report,
    lemma1_rate,
    lemma2_rate,
    monotone_check,
    potential_game_check,
)
from tests.test_bestresponse import knapsack_by_enumeration


def _report(criterion: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="module")
def ev_default():
    return ev_game(EvParams(), seed=7)


@pytest.fixture(scope="module")
def ev_tight(ev_default):
    cfg = replace(ev_default.solver_defaults, tol=1e-8, max_iters=3000)
    return solve_admm(ev_default.game, cfg, virtual_cost=ev_default.virtual_cost)


def test_criterion_1_ev_equivalence_and_gap(ev_default, ev_tight):
    t0 = time.monotonic()
    game = ev_default.game
    problem = SocialProblem(game=game, virtual_cost=ev_default.virtual_cost)
    cfg = replace(ev_default.solver_defaults, tol=1e-8, max_iters=3000)
    sol = solve_social_direct(problem, cfg)
    mfe_cost = social_cost(problem, ev_tight.controls,
                           game.aggregate_mean(ev_tight.controls))
    rel_match = abs(mfe_cost - sol.value) / (1.0 + abs(sol.value))
    gap = duality_gap(problem, ev_tight.controls, ev_tight.z_star,
                      ev_tight.lambda_star)
    rel_gap = abs(gap) / (1.0 + abs(mfe_cost))
    elapsed = time.monotonic() - t0
    ok = (ev_tight.converged and sol.converged and rel_match <= 1e-3
          and rel_gap <= 1e-6 and elapsed <= 60.0)
    _report("1 (EV equivalence)", ok,
            f"match {rel_match:.2e}, gap {rel_gap:.2e}, {elapsed:.1f}s")


def test_criterion_2_algorithm_agreement(ev_default):
    game = ev_default.game
    cfg = replace(ev_default.solver_defaults, tol=1e-6, max_iters=20000)
    results = {
        "mann": solve_fixed_point(game, cfg),
        "primal-dual": solve_primal_dual(game, cfg,
                                         virtual_cost=ev_default.virtual_cost),
        "admm": solve_admm(game, cfg, virtual_cost=ev_default.virtual_cost),
    }
    assert all(r.converged for r in results.values())
    worst = 0.0
    for a, b in itertools.combinations(results.values(), 2):
        za, zb = a.z_star.values, b.z_star.values
        ua = np.concatenate(a.controls)
        ub = np.concatenate(b.controls)
        worst = max(worst,
                    np.linalg.norm(za - zb) / (1 + np.linalg.norm(zb)),
                    np.linalg.norm(ua - ub) / (1 + np.linalg.norm(ub)))
    _report("2 (algorithm agreement)", worst <= 1e-3,
            f"worst pairwise relative distance {worst:.2e}")


def test_criterion_3_iteration_counts(ev_default):
    game = ev_default.game
    cfg = replace(ev_default.solver_defaults, tol=1e-4, max_iters=1000,
                  step=StepSchedule("diminishing", 1.0, 1.0))
    mann = solve_fixed_point(game, cfg)
    admm = solve_admm(game, cfg, virtual_cost=ev_default.virtual_cost)
    ok = (mann.converged and admm.converged
          and admm.iterations <= 100 and mann.iterations <= 200
          and admm.iterations < mann.iterations)
    _report("3 (iteration counts)", ok,
            f"admm {admm.iterations} < mann {mann.iterations} at tol 1e-4")


def test_criterion_4_scaled_step_equivalence(ev_default):
    game = ev_default.game
    slope = ev_default.facts["dual_scale"]
    cfg_m = replace(ev_default.solver_defaults, max_iters=50, tol=1e-16,
                    track_mf_residual=False)
    cfg_pd = replace(cfg_m, step=StepSchedule("diminishing", slope, 1.0))
    mann = solve_fixed_point(game, cfg_m)
    pd = solve_primal_dual(game, cfg_pd, virtual_cost=ev_default.virtual_cost)
    # The dual-ascent supplier decision is indexed one step behind.
    diffs = [float(np.max(np.abs(a - b)))
             for a, b in zip(mann.traces["z"][:49], pd.traces["z"][1:50])]
    worst = max(diffs)
    _report("4 (scaled-step equivalence)", worst <= 1e-8,
            f"max per-iterate deviation {worst:.2e} over 49 aligned iterates")


def test_criterion_5_sine_case():
    n, kappa = 50, 1.5
    bundle = sine_game(kappa=kappa, n=n)
    game = bundle.game
    cfg = replace(bundle.solver_defaults, z0=game.space.ones())
    res = solve_fixed_point(game, cfg)
    zn = [game.space.norm(z) for z in res.traces["z"]]
    ratios = [zn[i + 1] / zn[i] for i in range(len(zn) - 1) if zn[i] > 1e-11]
    contraction_ok = res.converged and max(ratios) <= 0.80
    final_ok = game.space.norm(res.z_star.values) <= 1e-8

    problem = SocialProblem(game=game, virtual_cost=bundle.virtual_cost)
    sol = solve_social_direct(problem, replace(cfg, max_iters=300))
    primal_ok = abs(sol.value - (-n * kappa)) / abs(n * kappa) <= 1e-6

    zeros = [np.zeros(game.space.dim) for _ in range(n)]
    gap = duality_gap(problem, zeros, game.space.zero(), game.space.zero())
    # Quadrature bound: the supplier cost is exact at z = 0 by construction,
    # so the only numerical error left is roundoff on the sums.
    gap_ok = abs(gap) <= 1e-10 * n * kappa

    mono = monotone_check(game.coupling, game.space, seed=0)
    mono_ok = (not mono.is_monotone) and mono.witness is not None

    ok = contraction_ok and final_ok and primal_ok and gap_ok and mono_ok
    _report("5 (sine case)", ok,
            f"ratio {max(ratios):.3f}, ||z|| {game.space.norm(res.z_star.values):.1e}, "
            f"primal {sol.value:.6f}, gap {gap:.1e}, witness {not mono.is_monotone}")


def test_criterion_6_rate_studies():
    t0 = time.monotonic()
    r1 = lemma1_rate(lemma_rate_family("kinked"), [16, 64, 256, 1024],
                     2000, seed=3)
    r2 = lemma2_rate(lemma_rate_family("quad-cost"), [16, 64, 256, 1024],
                     2000, seed=3)
    fam = lambda nn, seed: ev_rate_game(nn, seed, stochastic=True)
    r3 = epsilon_rate_study(fam, [25, 50, 100, 200, 400],
                            mode=("sampled", 8), seed=3)
    elapsed = time.monotonic() - t0
    ok = (-0.65 <= r1.slope <= -0.35 and -1.2 <= r2.slope <= -0.8
          and r3.slope <= -0.4
          and max(r1.n_values) / min(r1.n_values) >= 16
          and max(r3.n_values) / min(r3.n_values) >= 16
          and r1.replications >= 2000 and r2.replications >= 2000
          and elapsed <= 600.0)
    _report("6 (rate studies)", ok,
            f"lemma1 {r1.slope:.3f}, lemma2 {r2.slope:.3f}, "
            f"epsilon {r3.slope:.3f}, {elapsed:.0f}s")


def test_criterion_7_potential_game_distinction(ev_default):
    lg = log_game(3)
    rep_log = potential_game_check(lg.game, samples=3, fd_step=1e-3, seed=0)
    rep_ev = potential_game_check(ev_default.game, samples=2, fd_step=1e-3,
                                  seed=0)
    eq_log = equivalence_report(
        lg.game, replace(lg.solver_defaults, tol=1e-9, max_iters=2000),
        virtual_cost=lg.virtual_cost)
    eq_ev = equivalence_report(
        ev_default.game,
        replace(ev_default.solver_defaults, tol=1e-6, max_iters=20000),
        virtual_cost=ev_default.virtual_cost)
    ok = (not rep_log.is_potential and rep_log.max_asymmetry > 1e-2
          and rep_ev.is_potential and rep_ev.max_asymmetry <= 1e-6
          and eq_log.passed() and eq_ev.passed())
    _report("7 (potential distinction)", ok,
            f"log asym {rep_log.max_asymmetry:.2e} (not potential), "
            f"ev asym {rep_ev.max_asymmetry:.2e} (potential), "
            f"reports {eq_log.passed()}/{eq_ev.passed()}")


def test_criterion_8_oracle_equivalence():
    # Best responses against 1e-3 grids on 20 seeded 3-dim instances.
    rng = np.random.default_rng(2024)
    sp = unit_space(3)
    grid = np.arange(0.0, 1.0 + 1e-12, 1e-3)
    g1, g2 = np.meshgrid(grid, grid, indexing="ij")
    g3 = 2.0 - g1 - g2
    mask = (g3 >= 0.0) & (g3 <= 1.0)
    worst_gap = 0.0
    for _ in range(20):
        d = rng.uniform(0.3, 2.0, 3)
        q = rng.uniform(-1, 1, 3)
        agent = AgentModel(space=sp, state_matrix=np.eye(3),
                           state_offset=sp.zero(), cost_quad=np.diag(d),
                           cost_lin=q, box_lower=np.zeros(3),
                           box_upper=np.ones(3), equality=(np.ones(3), 2.0))
        y = sp.wrap(rng.uniform(-1, 1, 3))
        u = best_response(agent, y)
        lin = q + y.values
        obj = (d[0] * g1**2 + d[1] * g2**2 + d[2] * g3**2
               + lin[0] * g1 + lin[1] * g2 + lin[2] * g3)
        best_grid = float(np.where(mask, obj, np.inf).min())
        got = float(u @ np.diag(d) @ u + lin @ u)
        worst_gap = max(worst_gap, got - best_grid)
    br_ok = worst_gap <= 2e-3

    # Knapsack projection against active-set enumeration on 50 instances.
    rng = np.random.default_rng(99)
    worst_proj = 0.0
    for _ in range(50):
        lo = rng.uniform(-1, 0, 6)
        hi = lo + rng.uniform(0.2, 2.0, 6)
        gamma = rng.uniform(lo.sum(), hi.sum())
        v = rng.uniform(-2, 2, 6)
        fast = knapsack_project(v, lo, hi, gamma)
        oracle = knapsack_by_enumeration(v, lo, hi, gamma)
        worst_proj = max(worst_proj, float(np.max(np.abs(fast - oracle))))
    proj_ok = worst_proj <= 1e-8

    # Routing: the two-edge instance against a 1e-3 flow grid.
    pig = routing_game({"vertices": [0, 1],
                        "edges": [(0, 1, 0.0, 1.0), (0, 1, 1.0, 0.0)]},
                       [(0, 1, 0.5), (0, 1, 0.5)])
    res = solve_admm(pig.game, replace(pig.solver_defaults, tol=1e-9,
                                       max_iters=4000),
                     virtual_cost=pig.virtual_cost)
    flows = pig.game.n * res.z_star.values
    f2 = np.arange(0.0, 1.0 + 1e-12, 1e-3)
    potential = (1.0 - f2) + 0.5 * f2**2
    oracle_f2 = f2[int(np.argmin(potential))]
    routing_ok = abs(flows[1] - oracle_f2) <= 1e-3

    ok = br_ok and proj_ok and routing_ok
    _report("8 (oracle equivalence)", ok,
            f"BR gap {worst_gap:.2e}, projection {worst_proj:.2e}, "
            f"pigou flow {flows[1]:.4f} vs {oracle_f2}")


def test_criterion_9_classical_inefficiency(ev_default, ev_tight):
    cfg = replace(ev_default.solver_defaults, tol=1e-8, max_iters=3000)
    cls = classical_social_solve(ev_default.game, cfg)
    mfe_classical = classical_cost(ev_default.game, ev_tight.controls)
    gap = mfe_classical - cls.value
    ok = cls.converged and gap > 0.0
    _report("9 (classical-welfare gap)", ok,
            f"MFE classical {mfe_classical:.4f} >= optimum {cls.value:.4f}, "
            f"strict gap {gap:.3e}")


def test_criterion_10_bitwise_determinism(tmp_path):
    args_sets = [
        ["solve", "--case", "ev", "--algorithm", "admm", "--seed", "7"],
        ["rates", "--study", "lemma2", "--n", "16,64,256",
         "--samples", "300", "--seed", "3"],
    ]
    ok = True
    details = []
    for i, args in enumerate(args_sets):
        a, b = tmp_path / f"a{i}", tmp_path / f"b{i}"
        for out in (a, b):
            code = main(args + ["--out-dir", str(out)])
            assert code == 0
        for csv_file in sorted(a.glob("*.csv")):
            same = csv_file.read_bytes() == (b / csv_file.name).read_bytes()
            ok = ok and same
            details.append(f"{csv_file.name}:{'same' if same else 'DIFFERS'}")
    _report("10 (determinism)", ok, ", ".join(details))
