import numpy as np
import pytest

from mfgsocial.cli import main
from mfgsocial.config import game_from_config
from mfgsocial.errors import UsageError

RAW_GAME = """
[space]
dim = 3
weights = 1,1,1
grid = 0,1,2

[coupling]
kind = affine
gain = 0.5
target = state-mean

[mf_cost]
kind = quadratic
coeff = 0.05

[agents]
mode = inline

[agent.0]
quad = 1
lin = -2
box_lower = 0
box_upper = 2

[agent.1]
quad = 0.5
lin = 0
box_lower = 0
box_upper = 2
demand = 1.5
"""


def test_game_from_config_inline_agents():
    game = game_from_config(RAW_GAME)
    assert game.n == 2
    assert game.space.dim == 3
    assert game.coupling.affine
    assert game.agents[1].equality[1] == 1.5
    assert game.mf_cost.value(game.space.ones()) == pytest.approx(0.15)


def test_game_from_config_generated_agents():
    text = """
[space]
dim = 2
weights = 1,1
grid = 0,1

[coupling]
kind = zero

[agents]
mode = generated
count = 4
seed = 3
quad = 1.0
box = -1,1
"""
    game = game_from_config(text)
    assert game.n == 4
    again = game_from_config(text)
    for a, b in zip(game.agents, again.agents):
        assert a.cost_lin.tobytes() == b.cost_lin.tobytes()


def test_game_from_config_missing_sections():
    with pytest.raises(UsageError):
        game_from_config("[space]\ndim = 1\nweights = 1\ngrid = 0\n")


def test_cli_solves_raw_game_config(tmp_path):
    cfg = tmp_path / "game.ini"
    cfg.write_text(RAW_GAME)
    out = tmp_path / "out"
    code = main(["solve", "--config", str(cfg), "--algorithm", "admm",
                 "--tol", "1e-8", "--out-dir", str(out)])
    assert code == 0
    assert (out / "equilibrium.csv").exists()


def test_cli_verify_with_precomputed_equilibrium(tmp_path):
    out = tmp_path / "sol"
    assert main(["solve", "--case", "ev", "--n", "15", "--seed", "4",
                 "--algorithm", "admm", "--tol", "1e-7",
                 "--out-dir", str(out)]) == 0
    code = main(["verify", "--case", "ev", "--n", "15", "--seed", "4",
                 "--tol", "1e-6", "--max-iters", "20000",
                 "--equilibrium", str(out / "equilibrium.csv"),
                 "--out-dir", str(tmp_path / "ver")])
    assert code == 0


def test_ev_price_csv_roundtrip(tmp_path):
    from mfgsocial.cases import EvParams, ev_game, load_price_csv

    path = tmp_path / "price.csv"
    path.write_text("period,price\n0,0.05\n1,0.02\n2,0.08\n3,0.04\n")
    prices = load_price_csv(path)
    assert np.array_equal(prices, [0.05, 0.02, 0.08, 0.04])
    bundle = ev_game(EvParams(n=2, horizon=4, c=prices,
                              demand_range=(0.4, 0.8)), seed=1)
    q = bundle.game.agents[0].cost_lin
    assert np.allclose(q, 2 * bundle.facts["gamma_price"] * prices)
