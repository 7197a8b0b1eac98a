"""Equilibrium algorithms and the residual that certifies a candidate.

Three solvers share one result type:

  - :func:`solve_fixed_point`: damped fixed-point iteration on the aggregate
    ``z <- z + nu_k (mean-response - z)``; a constant unit step is the plain
    Picard iteration used for contractive couplings.
  - :func:`solve_primal_dual`: dual ascent on the constructed social problem;
    agents respond to the multiplier, the supplier solves its shifted
    subproblem, and the multiplier moves along the balance residual.
  - :func:`solve_admm`: scaled-dual ADMM on the sharing form of the same
    problem.

All three return an :class:`EquilibriumResult` carrying the full residual
history (exported as CSV), and all reductions over agents run in fixed agent
order so identical configurations reproduce bitwise-identical histories.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bestresponse import (
    batch_best_response,
    batch_solve_qp,
    br_objective,
    decoupled_optima,
    make_batch_plan,
    solve_agent_qp,
)
from .errors import NumericalError, UsageError
from .model import CONTROL_MEAN, GameInstance, VirtualCost, build_virtual_cost
from .space import Trajectory

__all__ = [
    "StepSchedule",
    "SolverConfig",
    "EquilibriumResult",
    "mf_residual",
    "solve_fixed_point",
    "solve_primal_dual",
    "solve_admm",
    "residual_history_to_csv",
]

HISTORY_COLUMNS = (
    "iter",
    "du_norm",
    "dz_norm",
    "dlambda_norm",
    "mf_residual",
    "primal_residual",
    "dual_residual",
)


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes: diminishing a/k^power (power in (0, 1]) or constant a."""

    kind: str = "diminishing"
    a: float = 1.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("diminishing", "constant"):
            raise UsageError(f"unknown schedule kind {self.kind!r}")
        if self.a <= 0:
            raise UsageError("step scale must be positive")
        if self.kind == "diminishing" and not (0.0 < self.power <= 1.0):
            raise UsageError(
                "diminishing schedule needs power in (0, 1] so steps vanish "
                "while their sum diverges"
            )

    def __call__(self, k: int) -> float:
        if self.kind == "constant":
            return self.a
        return self.a / float(k) ** self.power


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 400
    tol: float = 1e-4
    step: StepSchedule = field(default_factory=StepSchedule)
    admm_penalty: float = 1.0
    seed: int = 0
    z0: Trajectory | None = None
    residual_balancing: bool = False
    allow_nonconvex: bool = False
    track_mf_residual: bool = True
    # The printed dual step uses the supplier decision computed from the same
    # multiplier as the agent responses; the alternative reuses the previous
    # loop's decision.  Exposed for comparison, not endorsed.
    dual_step_uses_stale_z: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise UsageError("max_iters must be >= 1")
        if self.tol <= 0:
            raise UsageError("tol must be positive")
        if self.admm_penalty <= 0:
            raise UsageError("admm_penalty must be positive")


@dataclass
class EquilibriumResult:
    controls: list[np.ndarray]
    z_star: Trajectory
    lambda_star: Trajectory
    residual_history: dict[str, list[float]]
    iterations: int
    converged: bool
    algorithm: str
    final_mf_residual: float = math.nan
    # Per-iteration norms for plotting: "z_norm" (list of floats) and
    # "u_norms" (list of per-agent norm arrays).
    traces: dict = field(default_factory=dict)

    def history_array(self) -> np.ndarray:
        return np.column_stack([np.asarray(self.residual_history[c], dtype=float)
                                for c in HISTORY_COLUMNS])


def residual_history_to_csv(result: EquilibriumResult, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    hist = result.residual_history
    for row in zip(*(hist[c] for c in HISTORY_COLUMNS)):
        writer.writerow([str(int(row[0]))] + ["%.17g" % v for v in row[1:]])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


# ---------------------------------------------------------------------------
# Residual
# ---------------------------------------------------------------------------

def _br_gaps(game: GameInstance, controls, y: Trajectory,
             responses=None, plan=None) -> float:
    pair = "control" if game.coupling.target == CONTROL_MEAN else "state"
    if responses is None:
        responses = batch_best_response(game, y, plan=plan)
    worst = 0.0
    for agent, u, mu in zip(game.agents, controls, responses):
        gap = br_objective(agent, y, u, pair) - br_objective(agent, y, mu, pair)
        worst = max(worst, gap)
    return max(worst, 0.0)


def mf_residual(game: GameInstance, controls: Sequence[np.ndarray],
                y: Trajectory, plan=None) -> float:
    """Certificate for a candidate: consistency plus best-response gaps.

    Returns the maximum of ``||y - F(aggregate mean)||`` and the largest
    per-agent suboptimality of u_i in the response problem priced at y.
    """
    controls = [np.asarray(u, dtype=float) for u in controls]
    mean = game.aggregate_mean(controls)
    consistency = game.space.norm(y.values - game.coupling(mean).values)
    return max(consistency, _br_gaps(game, controls, y, plan=plan))


# ---------------------------------------------------------------------------
# Shared scaffolding
# ---------------------------------------------------------------------------

def _new_history() -> dict[str, list[float]]:
    return {c: [] for c in HISTORY_COLUMNS}


def _push(hist, k, du, dz, dlam, mf=math.nan, primal=math.nan, dual=math.nan):
    hist["iter"].append(k)
    hist["du_norm"].append(du)
    hist["dz_norm"].append(dz)
    hist["dlambda_norm"].append(dlam)
    hist["mf_residual"].append(mf)
    hist["primal_residual"].append(primal)
    hist["dual_residual"].append(dual)


def _max_du(controls, prev) -> float:
    return max(float(np.linalg.norm(u - v)) for u, v in zip(controls, prev))


def _warm_start(game: GameInstance, config: SolverConfig, plan):
    """Decoupled optima and the aggregate they generate (or the caller's z0)."""
    u0 = decoupled_optima(game, plan=plan)
    m0 = game.aggregate_mean(u0)
    z0 = config.z0 if config.z0 is not None else m0
    return u0, z0


# ---------------------------------------------------------------------------
# Fixed point (Mann / Picard)
# ---------------------------------------------------------------------------

def solve_fixed_point(game: GameInstance, config: SolverConfig) -> EquilibriumResult:
    """Damped fixed-point iteration on the aggregate.

    Per iteration: price the previous aggregate, collect best responses,
    move the aggregate one step toward the response mean.  Stops only when
    both the aggregate and every control settle below tol; exhausting the
    budget returns a non-converged result with its history intact.
    """
    plan = make_batch_plan(game)
    u_prev, z = _warm_start(game, config, plan)
    hist = _new_history()
    traces = {"z_norm": [], "u_norms": [], "z": []}
    converged = False
    iterations = 0
    pending = None  # row awaiting its retrospective best-response gaps

    for k in range(1, config.max_iters + 1):
        y = game.coupling(z)
        u = batch_best_response(game, y, plan=plan)
        if pending is not None:
            # u are exact responses to y = F(z^{k-1}), completing the
            # previous row's certificate at no extra cost.
            idx, ctrl_p, y_p, cons_p = pending
            hist["mf_residual"][idx] = max(
                cons_p, _br_gaps(game, ctrl_p, y_p, responses=u)
            )
            pending = None
        m = game.aggregate_mean(u)
        nu = config.step(k)
        z_new = game.space.wrap(z.values + nu * (m.values - z.values))

        du = _max_du(u, u_prev)
        dz = game.space.norm(z_new.values - z.values)
        lam_new = game.coupling(z_new)
        dlam = game.space.norm(lam_new.values - y.values)
        primal = game.space.norm(m.values - z_new.values)
        _push(hist, k, du, dz, dlam, primal=primal)
        traces["z_norm"].append(game.space.norm(z_new.values))
        traces["u_norms"].append(np.array([float(np.linalg.norm(ui)) for ui in u]))
        traces["z"].append(z_new.values.copy())
        if config.track_mf_residual:
            cons = game.space.norm(lam_new.values - game.coupling(m).values)
            pending = (len(hist["mf_residual"]) - 1, u, lam_new, cons)

        u_prev, z = u, z_new
        iterations = k
        if du <= config.tol and dz <= config.tol:
            converged = True
            break

    lam = game.coupling(z)
    final = mf_residual(game, u_prev, lam, plan=plan)
    if hist["mf_residual"]:
        hist["mf_residual"][-1] = final
    return EquilibriumResult(
        controls=u_prev, z_star=z, lambda_star=lam,
        residual_history=hist, iterations=iterations, converged=converged,
        algorithm="fixed-point", final_mf_residual=final, traces=traces,
    )


# ---------------------------------------------------------------------------
# Supplier subproblems
# ---------------------------------------------------------------------------

def _solve_z_stationarity(vc: VirtualCost, lam_vals: np.ndarray,
                          shift: float = 0.0, anchor: np.ndarray | None = None,
                          tie_anchor: np.ndarray | None = None,
                          tol: float = 1e-12) -> np.ndarray:
    """Solve F(z) + shift (z - anchor) = lam coordinatewise or by Newton.

    With shift = 0 this is the stationarity of the shifted supplier problem
    (min phi - n lam . z); with shift = rho it is the proximal step.  When
    the system is degenerate (directions where phi is flat), the solution
    nearest ``tie_anchor`` is returned, so callers can break ties toward the
    balance target.
    """
    coupling = vc.coupling
    space = coupling.space
    T = space.dim
    if anchor is None:
        anchor = np.zeros(T)

    if coupling.affine:
        z0 = space.zero()
        F0 = coupling(z0).values
        J = coupling.jacobian_at(z0)
        A = J + shift * np.eye(T)
        base = np.zeros(T) if tie_anchor is None else np.asarray(tie_anchor)
        rhs = lam_vals - F0 + shift * anchor - A @ base
        z, residual, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        if space.norm(A @ z - rhs) > 1e-9 * (1.0 + space.norm(rhs)):
            raise NumericalError(
                "supplier stationarity has no solution for this multiplier"
            )
        return base + z

    if coupling.pointwise:
        from scipy.optimize import brentq

        out = np.zeros(T)
        probe = np.zeros(T)
        for k in range(T):

            def f(val, k=k):
                probe[k] = val
                fv = coupling(space.wrap(probe)).values[k]
                probe[k] = 0.0
                return fv + shift * (val - anchor[k]) - lam_vals[k]

            width = 1.0
            lo, hi = anchor[k] - width, anchor[k] + width
            flo, fhi = f(lo), f(hi)
            while flo * fhi > 0.0 and width < 1e12:
                width *= 2.0
                lo, hi = anchor[k] - width, anchor[k] + width
                flo, fhi = f(lo), f(hi)
            if flo * fhi > 0.0:
                raise NumericalError(
                    f"no root for the supplier stationarity at coordinate {k}"
                )
            out[k] = brentq(f, lo, hi, xtol=tol, maxiter=200)
        return out

    # Damped Newton on the full system.
    z = anchor.copy()
    r = np.full(T, np.inf)
    for _ in range(200):
        zt = space.wrap(z)
        r = coupling(zt).values + shift * (z - anchor) - lam_vals
        if np.linalg.norm(r) <= tol * (1.0 + np.linalg.norm(lam_vals)):
            return z
        J = coupling.jacobian_at(zt) + shift * np.eye(T)
        try:
            dz = np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular Newton system: {exc}") from exc
        t = 1.0
        base = np.linalg.norm(r)
        while t > 1e-12:
            cand = z - t * dz
            rc = coupling(space.wrap(cand)).values + shift * (cand - anchor) - lam_vals
            if np.linalg.norm(rc) < base:
                break
            t *= 0.5
        z = z - t * dz
    raise NumericalError("supplier Newton iteration failed to converge",
                         residual=float(np.linalg.norm(r)))


def _supplier_argmin(vc: VirtualCost, lam: Trajectory,
                     tie_anchor: np.ndarray | None = None) -> Trajectory:
    """argmin_z phi(z) - n lam . z (closed form wins over stationarity)."""
    if vc.argmin_shifted is not None:
        res = vc.argmin_shifted(lam)
        if res is None:
            raise NumericalError("supplier subproblem unbounded for this multiplier")
        return res[0]
    return lam.space.wrap(
        _solve_z_stationarity(vc, lam.values, tie_anchor=tie_anchor))


def _supplier_prox(vc: VirtualCost, a: Trajectory, rho: float) -> Trajectory:
    """argmin_z phi(z) + (n rho / 2)||z - a||^2 via stationarity."""
    if vc.prox is not None:
        return vc.prox(a, rho)
    z = _solve_z_stationarity(vc, np.zeros(a.space.dim), shift=rho, anchor=a.values)
    return a.space.wrap(z)


# ---------------------------------------------------------------------------
# Primal-dual (dual ascent on the constructed problem)
# ---------------------------------------------------------------------------

def solve_primal_dual(game: GameInstance, config: SolverConfig,
                      virtual_cost: VirtualCost | None = None) -> EquilibriumResult:
    """Dual ascent on the constructed social problem.

    The returned triple is the one produced by a single multiplier: u* and z*
    both come from lambda*, so the supplier stationarity
    ``grad phi(z*) = N lambda*`` and the best-response conditions hold exactly
    at the reported candidate.
    """
    vc = virtual_cost if virtual_cost is not None else build_virtual_cost(
        game.coupling, game.n)
    plan = make_batch_plan(game)
    u_prev, z_warm = _warm_start(game, config, plan)
    lam = game.coupling(z_warm)
    z = _supplier_argmin(vc, lam, tie_anchor=z_warm.values)
    z_stale = z
    hist = _new_history()
    traces = {"z_norm": [], "u_norms": [], "z": []}
    converged = False
    iterations = 0
    u = u_prev

    for k in range(1, config.max_iters + 1):
        u = batch_best_response(game, lam, plan=plan)
        m = game.aggregate_mean(u)
        z_prev = z
        z = _supplier_argmin(vc, lam, tie_anchor=m.values)
        z_for_dual = z_stale if config.dual_step_uses_stale_z else z
        iota = config.step(k)
        lam_new = game.space.wrap(lam.values + iota * (m.values - z_for_dual.values))
        z_stale = z

        du = _max_du(u, u_prev)
        dz = game.space.norm(z.values - z_prev.values)
        dlam = game.space.norm(lam_new.values - lam.values)
        primal = game.space.norm(m.values - z.values)
        mf = math.nan
        if config.track_mf_residual:
            # u solves the response problem at lam exactly, so the gap part
            # of the certificate vanishes at the reported candidate.
            mf = game.space.norm(lam.values - game.coupling(m).values)
        _push(hist, k, du, dz, dlam, mf=mf, primal=primal)
        traces["z_norm"].append(game.space.norm(z.values))
        traces["u_norms"].append(np.array([float(np.linalg.norm(ui)) for ui in u]))
        traces["z"].append(z.values.copy())

        u_prev = u
        iterations = k
        if du <= config.tol and dlam <= config.tol and primal <= config.tol:
            converged = True
            break
        lam = lam_new

    final = mf_residual(game, u, lam, plan=plan)
    if hist["mf_residual"]:
        hist["mf_residual"][-1] = final
    return EquilibriumResult(
        controls=u, z_star=z, lambda_star=lam,
        residual_history=hist, iterations=iterations, converged=converged,
        algorithm="primal-dual", final_mf_residual=final, traces=traces,
    )


# ---------------------------------------------------------------------------
# ADMM on the sharing form
# ---------------------------------------------------------------------------

def _admm_agent_updates(game: GameInstance, plan, controls, targets, rho):
    """Per-agent proximal best responses against their sharing targets."""
    w = game.space.weights
    offsets = None
    if game.coupling.target != CONTROL_MEAN:
        offsets = np.stack([a.state_offset.values for a in game.agents])
    if plan is not None and plan.state_stack is None:
        # Exposure is u (+ offset): diagonal prox solved in one batch.
        resid = targets if offsets is None else targets - offsets
        lin_extra = -rho * (w[None, :] * resid)
        quad_extra = np.broadcast_to(0.5 * rho * w[None, :], plan.lin.shape)
        U = batch_solve_qp(game, plan, lin_extra, quad_extra_diag=quad_extra)
        return [U[i] for i in range(game.n)]
    out = []
    for i, agent in enumerate(game.agents):
        B = game.exposure_matrix(i)
        offset = (np.zeros(game.space.dim) if offsets is None else offsets[i])
        quad_extra = 0.5 * rho * B.T @ (w[:, None] * B)
        lin_extra = rho * B.T @ (w * (offset - targets[i]))
        out.append(solve_agent_qp(agent, lin_extra=lin_extra,
                                  quad_extra=quad_extra, x0=controls[i]))
    return out


def solve_admm(game: GameInstance, config: SolverConfig,
               virtual_cost: VirtualCost | None = None) -> EquilibriumResult:
    """Scaled-dual ADMM on ``min sum V_i + phi(z) s.t. mean exposure = z``.

    Agent updates are independent proximal best responses, the supplier takes
    a proximal step on phi, and the scaled multiplier accumulates the balance
    residual.  The reported multiplier is penalty times the scaled dual,
    which equals F(z*) exactly by the supplier stationarity.
    """
    if not (game.coupling.monotone or config.allow_nonconvex):
        raise UsageError(
            "ADMM requires a monotone coupling (convex supplier cost); "
            "pass allow_nonconvex=True to override"
        )
    vc = virtual_cost if virtual_cost is not None else build_virtual_cost(
        game.coupling, game.n)
    plan = make_batch_plan(game)
    rho = config.admm_penalty

    u, z_warm = _warm_start(game, config, plan)
    m = game.aggregate_mean(u)
    z = config.z0 if config.z0 is not None else m
    w_dual = game.coupling(z).values / rho
    lam_prev = game.space.wrap(rho * w_dual)
    hist = _new_history()
    traces = {"z_norm": [], "u_norms": [], "z": []}
    converged = False
    iterations = 0

    for k in range(1, config.max_iters + 1):
        expo = [game.exposure_values(i, u[i]) for i in range(game.n)]
        shift = m.values - z.values + w_dual
        targets = np.stack([e - shift for e in expo])
        u_new = _admm_agent_updates(game, plan, u, targets, rho)
        m = game.aggregate_mean(u_new)
        z_prev = z
        z = _supplier_prox(vc, game.space.wrap(m.values + w_dual), rho)
        w_dual = w_dual + m.values - z.values

        du = _max_du(u_new, u)
        dz = game.space.norm(z.values - z_prev.values)
        primal = game.space.norm(m.values - z.values)
        dual = rho * dz
        lam = game.space.wrap(rho * w_dual)
        dlam = game.space.norm(lam.values - lam_prev.values)
        lam_prev = lam
        mf = math.nan
        if config.track_mf_residual:
            mf = mf_residual(game, u_new, lam, plan=plan)
        _push(hist, k, du, dz, dlam, mf=mf, primal=primal, dual=dual)
        traces["z_norm"].append(game.space.norm(z.values))
        traces["u_norms"].append(np.array([float(np.linalg.norm(ui)) for ui in u_new]))
        traces["z"].append(z.values.copy())

        u = u_new
        iterations = k
        # du guards the flat directions of nearly-degenerate private costs,
        # where controls keep sliding while the aggregate looks settled.
        if primal <= config.tol and dual <= config.tol and du <= config.tol:
            converged = True
            break
        if config.residual_balancing:
            if primal > 10.0 * dual:
                rho *= 2.0
                w_dual = w_dual / 2.0
            elif dual > 10.0 * primal:
                rho /= 2.0
                w_dual = w_dual * 2.0

    lam = game.space.wrap(rho * w_dual)
    final = mf_residual(game, u, lam, plan=plan)
    if hist["mf_residual"]:
        hist["mf_residual"][-1] = final
    return EquilibriumResult(
        controls=u, z_star=z, lambda_star=lam,
        residual_history=hist, iterations=iterations, converged=converged,
        algorithm="admm", final_mf_residual=final, traces=traces,
    )
