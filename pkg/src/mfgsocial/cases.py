"""Seeded generators for the bundled concrete games.

Each generator returns a :class:`CaseBundle`: the game, its virtual cost
with closed-form supplier subproblems attached, a dict of analytic facts the
tests rely on, and per-algorithm solver defaults.  Generators are pure in
(params, seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .equilibrium import SolverConfig, StepSchedule
from .errors import InfeasibilityError, UsageError
from .model import (
    CONTROL_MEAN,
    STATE_MEAN,
    AgentModel,
    Coupling,
    GameInstance,
    MeanFieldCost,
    NoiseSpec,
    VirtualCost,
    build_virtual_cost,
    zero_mean_field_cost,
)
from .space import Trajectory, TrajectorySpace, exponential_space, unit_space

__all__ = [
    "CaseBundle",
    "EvParams",
    "ev_game",
    "sine_game",
    "routing_game",
    "log_game",
    "ev_rate_game",
    "RateModel",
    "lemma_rate_family",
    "load_price_csv",
]

EV_PERIOD_SECONDS = 300.0  # five-minute control periods


@dataclass(frozen=True)
class CaseBundle:
    game: GameInstance
    virtual_cost: VirtualCost
    facts: dict
    solver_defaults: SolverConfig


# ---------------------------------------------------------------------------
# Electric-vehicle charging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvParams:
    """Population parameters for the charging game.

    Heterogeneous fleet attributes are drawn uniformly from the configured
    ranges; the defaults describe a small commuter fleet (capacities in kWh,
    rates in kW) over 36 five-minute periods and are fully overridable.
    """

    n: int = 100
    horizon: int = 36
    # The price slope 2 (gamma_price - eta) is kept at a power of two so the
    # scaled-step identity between dual ascent and the damped fixed point is
    # exact in floating point, not just to rounding.
    eta: float = 0.015625
    gamma_price: float = 1.015625
    c: float | np.ndarray | None = None
    capacity_range: tuple[float, float] = (15.0, 20.0)
    rate_range: tuple[float, float] = (6.0, 8.0)
    demand_range: tuple[float, float] = (6.0, 11.0)
    soc0_range: tuple[float, float] = (0.0, 0.2)


def load_price_csv(path) -> np.ndarray:
    """Read a per-period price profile from a CSV with period,price columns."""
    import csv as _csv

    with open(path, newline="") as fh:
        rows = list(_csv.reader(fh))
    if not rows:
        raise UsageError("empty price CSV")
    start = 1 if rows[0] and not _is_float(rows[0][-1]) else 0
    pairs = sorted((int(float(r[0])), float(r[1])) for r in rows[start:] if r)
    return np.array([p for _, p in pairs])


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _ev_price_profile(params: EvParams, T: int) -> np.ndarray:
    if params.c is None:
        # Wholesale-style daily shape: cheap early, peak later.
        k = np.arange(T)
        return 0.05 * (1.0 + 0.5 * np.sin(2.0 * np.pi * k / T))
    c = np.asarray(params.c, dtype=float)
    if c.ndim == 0:
        return np.full(T, float(c))
    if c.shape != (T,):
        raise UsageError(f"price profile length {c.shape} != horizon {T}")
    return c


def ev_game(params: EvParams | None = None, seed: int = 7) -> CaseBundle:
    """Charging-coordination game: integrator batteries, affine price coupling.

    Heterogeneous parameters (capacity, max rate, initial charge, demand) are
    drawn uniformly from the configured ranges; a demand draw that cannot fit
    the battery headroom or the rate limit is resampled up to 100 times.
    """
    params = params or EvParams()
    if params.n < 1 or params.horizon < 1:
        raise UsageError("n and horizon must be positive")
    eta, gamma = params.eta, params.gamma_price
    if not 0 < eta < gamma:
        raise UsageError("needs 0 < eta < gamma_price")
    if eta >= gamma / 10.0:
        warnings.warn(
            f"eta={eta} is not small relative to gamma_price={gamma} "
            "(expected eta << gamma); proceeding anyway",
            stacklevel=2,
        )
    T = params.horizon
    space = TrajectorySpace(weights=np.ones(T), grid=np.arange(T) * EV_PERIOD_SECONDS)
    c = _ev_price_profile(params, T)
    rng = np.random.default_rng((int(seed), 101))

    cumsum = np.tril(np.ones((T, T)))
    Q = eta * np.eye(T)
    q = 2.0 * gamma * c

    agents = []
    for _ in range(params.n):
        capacity = rng.uniform(*params.capacity_range)
        rate_kw = rng.uniform(*params.rate_range)
        u_max = rate_kw * EV_PERIOD_SECONDS / 3600.0  # kWh per period
        soc0 = capacity * rng.uniform(*params.soc0_range)
        headroom = min(capacity - soc0, T * u_max)
        demand = rng.uniform(*params.demand_range)
        tries = 0
        while demand > headroom:
            tries += 1
            if tries > 100:
                raise InfeasibilityError(
                    f"could not draw a feasible demand below headroom {headroom:.3g}"
                )
            demand = rng.uniform(*params.demand_range)
        # State-of-charge caps are prefix-sum halfspaces; with charging-only
        # controls and the feasible demand they are implied, but they stay on
        # the model so the admissible set is stated in full.
        G = np.vstack([cumsum, -cumsum])
        h = np.concatenate([
            np.full(T, capacity - soc0),
            np.full(T, soc0),
        ])
        agents.append(AgentModel(
            space=space,
            state_matrix=cumsum,
            state_offset=space.wrap(np.full(T, soc0)),
            cost_quad=Q,
            cost_lin=q,
            box_lower=np.zeros(T),
            box_upper=np.full(T, u_max),
            equality=(np.ones(T), demand),
            inequalities=(G, h),
        ))

    slope = 2.0 * (gamma - eta)
    coupling = Coupling(
        space=space,
        map=lambda z: space.wrap(slope * z.values),
        lipschitz=slope,
        monotone=True,
        target=CONTROL_MEAN,
        jacobian=lambda z: slope * np.eye(T),
        affine=True,
        pointwise=True,
        name="affine-price",
    )
    mf_cost = MeanFieldCost(
        space=space,
        g=lambda z: eta * space.dot(z.values, z.values),
        grad_g=lambda z: space.wrap(2.0 * eta * z.values),
        grad_lipschitz=2.0 * eta,
        quadratic=True,
    )
    game = GameInstance(agents=tuple(agents), coupling=coupling,
                        mf_cost=mf_cost, space=space)

    n = params.n
    coeff = n * (gamma - eta)

    def phi(z: Trajectory) -> float:
        return coeff * space.dot(z.values, z.values)

    def argmin_shifted(lam: Trajectory):
        z = space.wrap(lam.values / slope)
        value = coeff * space.dot(z.values, z.values) - n * space.dot(lam.values, z.values)
        return z, value

    def prox(a: Trajectory, rho: float) -> Trajectory:
        return space.wrap(rho * a.values / (slope + rho))

    vc = build_virtual_cost(coupling, n, closed_form=phi, phi0=0.0,
                            argmin_shifted=argmin_shifted, prox=prox)
    facts = {
        "eta": eta,
        "gamma_price": gamma,
        "price_profile": c,
        "dual_scale": slope,          # lambda = (dual_scale) * z at stationarity
        "demands": np.array([a.equality[1] for a in agents]),
        "period_seconds": EV_PERIOD_SECONDS,
    }
    defaults = SolverConfig(max_iters=400, tol=1e-4,
                            step=StepSchedule("diminishing", 1.0, 1.0),
                            admm_penalty=0.125, seed=seed)
    return CaseBundle(game=game, virtual_cost=vc, facts=facts,
                      solver_defaults=defaults)


# ---------------------------------------------------------------------------
# Sine coupling on a discounted space
# ---------------------------------------------------------------------------

def sine_game(kappa: float, rho: float = 1.0, dt: float = 0.1,
              t_max: float | None = None, n: int = 50) -> CaseBundle:
    """Non-monotone sinusoidal coupling over an exponentially weighted grid.

    Identity dynamics, private cost equal to the squared space norm, and an
    unconstrained action set (a +-1e6 box stands in for the whole space).
    The unique aggregate fixed point is zero whenever kappa < 2, and the
    social optimum value is exactly -n*kappa.
    """
    if kappa <= 0:
        raise UsageError("kappa must be positive")
    space = exponential_space(rho=rho, dt=dt, t_max=t_max)
    T = space.dim
    t = space.grid
    decay = np.exp(-t)

    agents = tuple(
        AgentModel(
            space=space,
            state_matrix=np.eye(T),
            state_offset=space.zero(),
            cost_quad=np.diag(space.weights),
            cost_lin=np.zeros(T),
            box_lower=np.full(T, -1e6),
            box_upper=np.full(T, 1e6),
        )
        for _ in range(n)
    )

    coupling = Coupling(
        space=space,
        map=lambda z: space.wrap(kappa * decay * np.sin(z.values)),
        lipschitz=kappa,
        monotone=False,
        target=STATE_MEAN,
        jacobian=lambda z: np.diag(kappa * decay * np.cos(z.values)),
        affine=False,
        pointwise=True,
        name="sine",
    )
    game = GameInstance(agents=agents, coupling=coupling,
                        mf_cost=zero_mean_field_cost(space), space=space)

    # phi(0) is pinned to the exact infinite-horizon value -n*kappa; the
    # z-dependent part is the weighted line integral of the coupling.
    def phi(z: Trajectory) -> float:
        bump = space.dot(decay * (1.0 - np.cos(z.values)), np.ones(T))
        return -n * kappa + n * kappa * bump

    def argmin_shifted(lam: Trajectory):
        if float(np.max(np.abs(lam.values))) <= 1e-14 * kappa:
            return space.zero(), -n * kappa
        return None  # linear term beats the bounded cosine: unbounded below

    vc = build_virtual_cost(coupling, n, closed_form=phi, phi0=-n * kappa,
                            argmin_shifted=argmin_shifted)
    facts = {
        "kappa": kappa,
        "rho": rho,
        "primal_value": -n * kappa,
        "contraction_factor": kappa / 2.0,
        "unique": kappa < 2.0,
    }
    defaults = SolverConfig(max_iters=500, tol=1e-9,
                            step=StepSchedule("constant", 1.0), seed=0)
    return CaseBundle(game=game, virtual_cost=vc, facts=facts,
                      solver_defaults=defaults)


# ---------------------------------------------------------------------------
# Splittable routing
# ---------------------------------------------------------------------------

def routing_game(graph: dict, commodities: list[tuple]) -> CaseBundle:
    """Splittable routing with affine increasing edge costs.

    ``graph`` is {"vertices": [...], "edges": [(tail, head, a_e, b_e), ...]}
    with per-edge cost a_e f + b_e; each commodity (s, t, r) becomes one
    agent whose decision is its vector of path flows (box + total-rate
    equality), exposed to the others through the induced edge loads.
    """
    import networkx as nx

    edges = list(graph["edges"])
    if not edges:
        raise UsageError("graph needs at least one edge")
    for (_, _, a_e, _) in edges:
        if a_e < 0:
            raise UsageError("edge cost slopes must be nonnegative (increasing costs)")
    n = len(commodities)
    if n < 1:
        raise UsageError("need at least one commodity")

    E = len(edges)
    space = TrajectorySpace(weights=np.ones(E), grid=np.arange(E, dtype=float))
    g = nx.MultiDiGraph()
    g.add_nodes_from(graph["vertices"])
    for idx, (u, v, _, _) in enumerate(edges):
        g.add_edge(u, v, key=idx)

    agents = []
    path_lists = []
    for (s, t, r) in commodities:
        if s not in g or t not in g or not nx.has_path(g, s, t):
            raise InfeasibilityError(f"commodity {s}->{t} is disconnected")
        paths = []
        seen_node_paths = set()
        for node_path in nx.all_simple_paths(g, s, t):
            # Multigraphs yield one node path per parallel edge; expand each
            # distinct node sequence over its parallel-edge options once.
            key = tuple(node_path)
            if key in seen_node_paths:
                continue
            seen_node_paths.add(key)
            options = [
                [k for k in g[u][v]] for u, v in zip(node_path[:-1], node_path[1:])
            ]
            combos = [[]]
            for opts in options:
                combos = [c + [k] for c in combos for k in opts]
            paths.extend(combos)
            if len(paths) > 100:
                raise UsageError("path enumeration exceeded the 100-path cap")
        if not paths:
            raise InfeasibilityError(f"no simple path for commodity {s}->{t}")
        path_lists.append(paths)
        P = np.zeros((E, len(paths)))
        for j, p in enumerate(paths):
            for edge_idx in p:
                P[edge_idx, j] = 1.0
        m = len(paths)
        agents.append(AgentModel(
            space=space,
            state_matrix=P,
            state_offset=space.zero(),
            cost_quad=np.zeros((m, m)),
            cost_lin=np.zeros(m),
            box_lower=np.zeros(m),
            box_upper=np.full(m, float(r)),
            equality=(np.ones(m), float(r)),
        ))

    slopes = np.array([a for (_, _, a, _) in edges])
    intercepts = np.array([b for (_, _, _, b) in edges])

    coupling = Coupling(
        space=space,
        map=lambda z: space.wrap(slopes * (n * z.values) + intercepts),
        lipschitz=float(n * slopes.max(initial=0.0)),
        monotone=True,
        target=STATE_MEAN,
        jacobian=lambda z: np.diag(n * slopes),
        affine=True,
        pointwise=True,
        name="edge-congestion",
    )
    game = GameInstance(agents=tuple(agents), coupling=coupling,
                        mf_cost=zero_mean_field_cost(space), space=space)

    def phi(z: Trajectory) -> float:
        # Line integral of the edge costs: the classic congestion potential.
        zv = z.values
        return float(n * np.sum(0.5 * slopes * n * zv**2 + intercepts * zv))

    vc = build_virtual_cost(coupling, n, closed_form=phi)
    facts = {
        "edges": edges,
        "paths": path_lists,
        "slopes": slopes,
        "intercepts": intercepts,
    }
    defaults = SolverConfig(max_iters=3000, tol=1e-6, admm_penalty=1.0)
    return CaseBundle(game=game, virtual_cost=vc, facts=facts,
                      solver_defaults=defaults)


# ---------------------------------------------------------------------------
# Scalar log-coupled game (not a potential game)
# ---------------------------------------------------------------------------

def log_game(n: int) -> CaseBundle:
    """Scalar states on [0.1, 10] with cost (x-1)^2 + x log(mean)."""
    if n < 2:
        raise UsageError("log game needs at least two agents")
    space = unit_space(1)
    agents = tuple(
        AgentModel(
            space=space,
            state_matrix=np.eye(1),
            state_offset=space.zero(),
            cost_quad=np.array([[1.0]]),
            cost_lin=np.array([-2.0]),
            box_lower=np.array([0.1]),
            box_upper=np.array([10.0]),
            cost_const=1.0,
        )
        for _ in range(n)
    )
    coupling = Coupling(
        space=space,
        map=lambda z: space.wrap(np.log(z.values)),
        lipschitz=10.0,  # 1/z on [0.1, 10]
        monotone=True,
        target=STATE_MEAN,
        jacobian=lambda z: np.diag(1.0 / z.values),
        affine=False,
        pointwise=True,
        sample_domain=(0.1, 10.0),
        name="log-price",
    )
    game = GameInstance(agents=agents, coupling=coupling,
                        mf_cost=zero_mean_field_cost(space), space=space)

    def phi(z: Trajectory) -> float:
        zv = float(z.values[0])
        return n * (zv * np.log(zv) - zv)

    def argmin_shifted(lam: Trajectory):
        lv = float(lam.values[0])
        z = space.wrap(np.array([np.exp(lv)]))
        return z, -n * float(np.exp(lv))

    def prox(a: Trajectory, rho: float) -> Trajectory:
        from scipy.optimize import brentq

        av = float(a.values[0])
        lo = min(1e-12, np.exp(-rho * max(-av, 0.0) - 1.0))
        while np.log(lo) + rho * (lo - av) > 0.0:
            lo *= 1e-4
        hi = max(av, 1.0) + 1.0
        while np.log(hi) + rho * (hi - av) < 0.0:
            hi *= 2.0
        root = brentq(lambda zz: np.log(zz) + rho * (zz - av), lo, hi, xtol=1e-14)
        return space.wrap(np.array([root]))

    vc = build_virtual_cost(coupling, n, closed_form=phi,
                            argmin_shifted=argmin_shifted, prox=prox)
    # The response map contracts at 1/(2 z*) here, so plain Picard is the
    # right default schedule.
    facts = {"n": n, "aggregate_fixed_point": 1.0}
    defaults = SolverConfig(max_iters=2000, tol=1e-8,
                            step=StepSchedule("constant", 1.0))
    return CaseBundle(game=game, virtual_cost=vc, facts=facts,
                      solver_defaults=defaults)


# ---------------------------------------------------------------------------
# Rate-study families
# ---------------------------------------------------------------------------

def ev_rate_game(n: int, seed: int, stochastic: bool = True,
                 horizon: int = 12) -> CaseBundle:
    """Charging-style family used for the equilibrium-quality rate study.

    Keeps the box + total-demand structure of the charging game, couples on
    the state mean through a modest affine price, and (optionally) perturbs
    states with truncated-Gaussian noise.  Identity dynamics keep the
    deviation subproblems exactly quadratic for every n.
    """
    T = horizon
    space = TrajectorySpace(weights=np.ones(T), grid=np.arange(T) * EV_PERIOD_SECONDS)
    rng = np.random.default_rng((int(seed), 909))
    eta = 0.1
    a_price = 0.1
    k = np.arange(T)
    c = 0.05 * (1.0 + 0.5 * np.sin(2.0 * np.pi * k / T))

    noise = None
    if stochastic:
        var = 0.04**2 * float(truncnorm_var(3.0))
        noise = NoiseSpec(kind="truncated-gaussian", scale=0.04,
                          second_moment=var * T * 1.01, clip=3.0)

    agents = []
    for _ in range(n):
        u_max = rng.uniform(0.5, 0.7)
        demand = rng.uniform(0.35, 0.55) * T * u_max
        agents.append(AgentModel(
            space=space,
            state_matrix=np.eye(T),
            state_offset=space.zero(),
            cost_quad=eta * np.eye(T),
            cost_lin=2.0 * c,
            box_lower=np.zeros(T),
            box_upper=np.full(T, u_max),
            equality=(np.ones(T), demand),
            noise=noise,
        ))

    coupling = Coupling(
        space=space,
        map=lambda z: space.wrap(a_price * z.values),
        lipschitz=a_price,
        monotone=True,
        target=STATE_MEAN,
        jacobian=lambda z: a_price * np.eye(T),
        affine=True,
        pointwise=True,
        name="affine-state-price",
    )
    game = GameInstance(agents=tuple(agents), coupling=coupling,
                        mf_cost=zero_mean_field_cost(space), space=space)

    def phi(z: Trajectory) -> float:
        return 0.5 * n * a_price * space.dot(z.values, z.values)

    def argmin_shifted(lam: Trajectory):
        z = space.wrap(lam.values / a_price)
        return z, (0.5 * n * a_price * space.dot(z.values, z.values)
                   - n * space.dot(lam.values, z.values))

    def prox(a: Trajectory, rho: float) -> Trajectory:
        return space.wrap(rho * a.values / (a_price + rho))

    vc = build_virtual_cost(coupling, n, closed_form=phi,
                            argmin_shifted=argmin_shifted, prox=prox)
    defaults = SolverConfig(max_iters=2000, tol=1e-9, admm_penalty=1.0)
    return CaseBundle(game=game, virtual_cost=vc,
                      facts={"eta": eta, "a_price": a_price},
                      solver_defaults=defaults)


def truncnorm_var(clip: float) -> float:
    from scipy.stats import truncnorm

    return float(truncnorm.var(-clip, clip))


@dataclass(frozen=True)
class RateModel:
    """Population of independent noisy states used by the lemma rate studies."""

    space: TrajectorySpace
    means: np.ndarray            # (N, T) expected states
    noise: NoiseSpec | None
    coupling: Coupling | None = None
    mf_cost: MeanFieldCost | None = None


def lemma_rate_family(kind: str, dim: int = 4):
    """Builders for the lemma rate studies, keyed by coupling structure.

    kind selects the mean-field map: "kinked" (absolute value at a kink of
    the mean, the generic square-root-rate regime), "affine", "constant",
    "quad-cost", "linear-cost", "constant-cost".
    """
    T = dim

    def build(n: int, seed: int) -> RateModel:
        space = unit_space(T)
        means = np.ones((n, T))
        if kind in ("kinked", "affine", "constant"):
            # Balanced +-1 expected states pin the population mean to zero:
            # for the kinked map that is the point whose curvature scale
            # matches the mean's fluctuation at every n, and for the others
            # it suppresses the dominant Monte-Carlo noise term.
            means[n // 2:] *= -1.0
        var = truncnorm_var(4.0)
        noise = NoiseSpec(kind="truncated-gaussian", scale=1.0,
                          second_moment=var * T * (1 + 1e-9), clip=4.0)
        coupling = None
        mf_cost = None
        if kind == "kinked":
            coupling = Coupling(space=space, map=lambda z: space.wrap(np.abs(z.values)),
                                lipschitz=1.0, monotone=False, pointwise=True,
                                name="abs")
        elif kind == "affine":
            coupling = Coupling(space=space,
                                map=lambda z: space.wrap(1.5 * z.values + 0.3),
                                lipschitz=1.5, monotone=True, affine=True,
                                pointwise=True,
                                jacobian=lambda z: 1.5 * np.eye(T),
                                name="affine")
        elif kind == "constant":
            coupling = Coupling(space=space,
                                map=lambda z: space.wrap(np.full(T, 0.7)),
                                lipschitz=0.0, monotone=True, affine=True,
                                jacobian=lambda z: np.zeros((T, T)),
                                name="constant")
        elif kind == "quad-cost":
            mf_cost = MeanFieldCost(space=space,
                                    g=lambda z: space.dot(z.values, z.values),
                                    grad_g=lambda z: space.wrap(2.0 * z.values),
                                    grad_lipschitz=2.0, quadratic=True)
        elif kind == "linear-cost":
            direction = np.linspace(1.0, 2.0, T)
            mf_cost = MeanFieldCost(space=space,
                                    g=lambda z: space.dot(direction, z.values),
                                    grad_g=lambda z: space.wrap(direction.copy()),
                                    grad_lipschitz=0.0, quadratic=True)
        elif kind == "constant-cost":
            mf_cost = MeanFieldCost(space=space, g=lambda z: 3.25,
                                    grad_g=lambda z: space.zero(),
                                    grad_lipschitz=0.0, quadratic=True)
        else:
            raise UsageError(f"unknown rate family kind {kind!r}")
        return RateModel(space=space, means=means, noise=noise,
                         coupling=coupling, mf_cost=mf_cost)

    return build
