"""Command-line front end: solve, compare, verify, rates.

Exit codes: 0 success, 1 usage or config error, 2 non-convergence,
3 verification failure.  Every command honors --seed and writes
fixed-precision CSVs, so identical flags reproduce identical bytes.

Config files are bracketed key-value text::

    [case]
    name = ev
    [ev]
    n = 100
    eta = 0.015625
    [solver]
    tol = 1e-4
    max_iters = 400

Arrays are comma-separated (for example ``c = 0.05,0.06,...``).
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cases import (
    CaseBundle,
    EvParams,
    ev_game,
    ev_rate_game,
    lemma_rate_family,
    log_game,
    routing_game,
    sine_game,
)
from .equilibrium import (
    SolverConfig,
    StepSchedule,
    residual_history_to_csv,
    solve_admm,
    solve_fixed_point,
    solve_primal_dual,
)
from .errors import InsufficientDataError, UsageError
from .plots import svg_line_plot
from .space import trajectories_to_csv
from .verify import (
    epsilon_rate_study,
    equivalence_report,
    lemma1_rate,
    lemma2_rate,
    rate_points_to_csv,
)

__all__ = ["main"]

RATE_BANDS = {
    "lemma1": (-0.65, -0.35),
    "lemma2": (-1.2, -0.8),
    "epsilon": (-float("inf"), -0.4),
}

PIGOU_GRAPH = {
    "vertices": [0, 1],
    "edges": [(0, 1, 0.0, 1.0), (0, 1, 1.0, 0.0)],
}
PIGOU_COMMODITIES = [(0, 1, 0.5), (0, 1, 0.5)]


def _read_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file {path!r} not found")
    return parser


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def _build_case(args) -> CaseBundle:
    cfg = _read_config(args.config) if args.config else None
    if cfg is not None and "space" in cfg:
        # Raw game description: [space]/[coupling]/[mf_cost]/[agents].
        from .config import game_from_config
        from .model import build_virtual_cost

        game = game_from_config(Path(args.config).read_text())
        vc = build_virtual_cost(game.coupling, game.n)
        return CaseBundle(game=game, virtual_cost=vc, facts={},
                          solver_defaults=SolverConfig())
    case = args.case
    if case is None and cfg is not None and "case" in cfg:
        case = cfg["case"].get("name")
    if case is None:
        raise UsageError("pass --case or a config file with a [case] section")

    if case == "ev":
        params = EvParams()
        if cfg is not None and "ev" in cfg:
            block = cfg["ev"]
            fields = {}
            for key in ("eta", "gamma_price"):
                if key in block:
                    fields[key] = float(block[key])
            for key in ("n", "horizon"):
                if key in block:
                    fields[key] = int(block[key])
            for key in ("capacity_range", "rate_range", "demand_range", "soc0_range"):
                if key in block:
                    lo, hi = _floats(block[key])
                    fields[key] = (lo, hi)
            if "c" in block:
                vals = _floats(block["c"])
                fields["c"] = vals if vals.size > 1 else float(vals[0])
            if "price_csv" in block:
                from .cases import load_price_csv

                fields["c"] = load_price_csv(block["price_csv"])
            params = replace(params, **fields)
        if args.n is not None:
            params = replace(params, n=int(args.n))
        return ev_game(params, seed=args.seed)
    if case == "sine":
        kwargs = {}
        if cfg is not None and "sine" in cfg:
            block = cfg["sine"]
            for key in ("kappa", "rho", "dt", "t_max"):
                if key in block:
                    kwargs[key] = float(block[key])
            if "n" in block:
                kwargs["n"] = int(block["n"])
        if args.kappa is not None:
            kwargs["kappa"] = args.kappa
        kwargs.setdefault("kappa", 1.5)
        if args.n is not None:
            kwargs["n"] = int(args.n)
        return sine_game(**kwargs)
    if case == "routing":
        graph, commodities = PIGOU_GRAPH, PIGOU_COMMODITIES
        if cfg is not None and "routing" in cfg:
            block = cfg["routing"]
            edges = []
            for chunk in block["edges"].split(";"):
                tail, head, a_e, b_e = chunk.split(",")
                edges.append((int(tail), int(head), float(a_e), float(b_e)))
            vertices = sorted({e[0] for e in edges} | {e[1] for e in edges})
            commodities = []
            for chunk in block["commodities"].split(";"):
                s, t, r = chunk.split(",")
                commodities.append((int(s), int(t), float(r)))
            graph = {"vertices": vertices, "edges": edges}
        return routing_game(graph, commodities)
    if case == "log":
        n = int(args.n) if args.n is not None else 3
        if cfg is not None and "log" in cfg and "n" in cfg["log"]:
            n = int(cfg["log"]["n"])
        return log_game(n)
    raise UsageError(f"unknown case {case!r}")


def _solver_config(args, bundle: CaseBundle, algorithm: str) -> SolverConfig:
    cfg = bundle.solver_defaults
    if args.config:
        parser = _read_config(args.config)
        if "solver" in parser:
            block = parser["solver"]
            fields = {}
            if "tol" in block:
                fields["tol"] = float(block["tol"])
            if "max_iters" in block:
                fields["max_iters"] = int(block["max_iters"])
            if "admm_penalty" in block:
                fields["admm_penalty"] = float(block["admm_penalty"])
            cfg = replace(cfg, **fields)
    if args.tol is not None:
        cfg = replace(cfg, tol=args.tol)
    if args.max_iters is not None:
        cfg = replace(cfg, max_iters=args.max_iters)
    cfg = replace(cfg, seed=args.seed)
    if algorithm == "mann":
        cfg = replace(cfg, step=StepSchedule("diminishing", 1.0, 1.0))
    elif algorithm == "fixed-point" and args.case != "sine":
        cfg = replace(cfg, step=StepSchedule("constant", 1.0))
    return cfg


def _run_algorithm(bundle: CaseBundle, algorithm: str, cfg: SolverConfig):
    game = bundle.game
    if algorithm in ("mann", "fixed-point"):
        return solve_fixed_point(game, cfg)
    if algorithm == "primal-dual":
        return solve_primal_dual(game, cfg, virtual_cost=bundle.virtual_cost)
    if algorithm == "admm":
        if not game.coupling.monotone:
            cfg = replace(cfg, allow_nonconvex=True)
        return solve_admm(game, cfg, virtual_cost=bundle.virtual_cost)
    raise UsageError(f"unknown algorithm {algorithm!r}")


def _write_equilibrium_csv(path, bundle: CaseBundle, result) -> None:
    game = bundle.game
    space = game.space
    trajs = [result.z_star, result.lambda_star]
    labels = ["z", "lambda"]
    uniform = all(u.shape == (space.dim,) for u in result.controls)
    for i, u in enumerate(result.controls):
        if uniform:
            trajs.append(space.wrap(u))
            labels.append(f"u_{i}")
        else:
            trajs.append(space.wrap(game.exposure_values(i, u)))
            labels.append(f"exposure_{i}")
    trajectories_to_csv(path, trajs, labels)


def _sampled_agent(result, seed: int) -> int:
    rng = np.random.default_rng((int(seed), 11))
    return int(rng.integers(0, len(result.controls)))


def _write_solve_outputs(out: Path, bundle: CaseBundle, result, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    residual_history_to_csv(result, out / "residuals.csv")
    _write_equilibrium_csv(out / "equilibrium.csv", bundle, result)
    iters = result.residual_history["iter"]
    agent = _sampled_agent(result, seed)
    u_norm = [row[agent] for row in result.traces["u_norms"]]
    svg_line_plot(
        out / "u_norm.svg", iters,
        {f"agent {agent}": u_norm},
        title=f"control norm per iteration ({result.algorithm})",
        xlabel="iteration", ylabel="||u||",
    )
    svg_line_plot(
        out / "z_norm.svg", iters,
        {"aggregate": result.traces["z_norm"]},
        title=f"aggregate norm per iteration ({result.algorithm})",
        xlabel="iteration", ylabel="||z||",
    )


def cmd_solve(args) -> int:
    bundle = _build_case(args)
    cfg = _solver_config(args, bundle, args.algorithm)
    result = _run_algorithm(bundle, args.algorithm, cfg)
    _write_solve_outputs(Path(args.out_dir), bundle, result, args.seed)
    print(f"{result.algorithm}: converged={result.converged} "
          f"iterations={result.iterations} mf_residual={result.final_mf_residual:.3e}")
    return 0 if result.converged else 2


def cmd_compare(args) -> int:
    bundle = _build_case(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for algorithm in ("mann", "primal-dual", "admm"):
        cfg = _solver_config(args, bundle, algorithm)
        results[algorithm] = _run_algorithm(bundle, algorithm, cfg)

    rows = ["algorithm,iter,z_norm,du_norm,dz_norm,mf_residual"]
    series = {}
    for name, res in results.items():
        hist = res.residual_history
        for k, zn, du, dz, mf in zip(hist["iter"], res.traces["z_norm"],
                                     hist["du_norm"], hist["dz_norm"],
                                     hist["mf_residual"]):
            rows.append(f"{name},{int(k)},{zn:.17g},{du:.17g},{dz:.17g},{mf:.17g}")
        series[name] = res.traces["z_norm"]
    (out / "compare.csv").write_text("\n".join(rows) + "\n")

    longest = max(len(s) for s in series.values())
    x = list(range(1, longest + 1))
    padded = {
        name: list(s) + [s[-1]] * (longest - len(s)) for name, s in series.items()
    }
    svg_line_plot(out / "z_norm_overlay.svg", x, padded,
                  title="aggregate norm per iteration",
                  xlabel="iteration", ylabel="||z||")

    lines = [f"{'algorithm':<12} {'converged':<10} {'iterations':<10}"]
    for name, res in results.items():
        lines.append(f"{name:<12} {str(res.converged):<10} {res.iterations:<10}")
    summary = "\n".join(lines)
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)

    pairs = list(results.values())
    agree = True
    for a in pairs:
        for b in pairs:
            za, zb = a.z_star.values, b.z_star.values
            rel = np.linalg.norm(za - zb) / (1.0 + np.linalg.norm(zb))
            agree = agree and rel <= 1e-3
    all_converged = all(r.converged for r in results.values())
    if not all_converged:
        return 2
    print(f"pairwise z agreement within 1e-3 relative: {agree}")
    return 0


def cmd_verify(args) -> int:
    bundle = _build_case(args)
    cfg = _solver_config(args, bundle, "admm")
    candidate = None
    if args.equilibrium:
        from .space import trajectories_from_csv

        _, labels, values = trajectories_from_csv(args.equilibrium)
        space = bundle.game.space
        z = space.wrap(values[labels.index("z")])
        lam = space.wrap(values[labels.index("lambda")])
        controls = [values[labels.index(f"u_{i}")]
                    for i in range(bundle.game.n)]
        candidate = (controls, z, lam)
    report = equivalence_report(bundle.game, cfg,
                                virtual_cost=bundle.virtual_cost,
                                candidate=candidate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    (out / "equivalence_report.txt").write_text(text)
    print(text, end="")
    return 0 if report.passed() else 3


def cmd_rates(args) -> int:
    if args.n is None:
        raise UsageError("rates needs --n with a comma-separated size list")
    n_list = [int(v) for v in str(args.n).split(",")]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.study == "lemma1":
            result = lemma1_rate(lemma_rate_family("kinked"), n_list,
                                 args.samples, seed=args.seed)
        elif args.study == "lemma2":
            result = lemma2_rate(lemma_rate_family("quad-cost"), n_list,
                                 args.samples, seed=args.seed)
        elif args.study == "epsilon":
            if args.case not in (None, "ev-stochastic", "ev-deterministic"):
                raise UsageError(
                    "epsilon study takes --case ev-stochastic or ev-deterministic"
                )
            stochastic = args.case != "ev-deterministic"
            family = lambda n, seed: ev_rate_game(n, seed, stochastic=stochastic)
            result = epsilon_rate_study(family, n_list, seed=args.seed)
        else:
            raise UsageError(f"unknown study {args.study!r}")
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return 1

    rate_points_to_csv(result, out / "rates.csv")
    svg_line_plot(
        out / "rates.svg", result.n_values, {"measured": result.values},
        title=f"{args.study} rate study", xlabel="log10 N", ylabel="log10 value",
        logx=True, logy=True,
        annotation=(f"slope {result.slope:.3f} "
                    f"[{result.ci_low:.3f}, {result.ci_high:.3f}]"),
    )
    lo, hi = RATE_BANDS[args.study]
    ok = lo <= result.slope <= hi
    print(f"{args.study}: slope={result.slope:.4f} "
          f"ci=[{result.ci_low:.4f}, {result.ci_high:.4f}] band=({lo}, {hi}) "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case",
                   help="ev | sine | routing | log (rates also accepts "
                        "ev-stochastic | ev-deterministic)")
    p.add_argument("--config", help="path to a bracketed key-value config file")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", default="out", dest="out_dir")
    p.add_argument("--kappa", type=float)
    p.add_argument("--n", help="population size (or comma list for rates)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgsocial",
        description="mean-field equilibria and their social-welfare counterparts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run one algorithm on one instance")
    _add_common(p_solve)
    p_solve.add_argument("--algorithm", default="admm",
                         choices=["mann", "primal-dual", "admm", "fixed-point"])

    p_cmp = sub.add_parser("compare", help="run all algorithms on one instance")
    _add_common(p_cmp)

    p_ver = sub.add_parser("verify", help="equivalence report for one instance")
    _add_common(p_ver)
    p_ver.add_argument("--equilibrium",
                       help="precomputed equilibrium CSV (from `solve`)")

    p_rates = sub.add_parser("rates", help="rate studies over population size")
    _add_common(p_rates)
    p_rates.add_argument("--study", required=True,
                         choices=["lemma1", "lemma2", "epsilon"])
    p_rates.add_argument("--samples", type=int, default=2000)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    handlers = {
        "solve": cmd_solve,
        "compare": cmd_compare,
        "verify": cmd_verify,
        "rates": cmd_rates,
    }
    try:
        return handlers[args.command](args)
    except (UsageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
