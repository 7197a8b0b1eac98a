"""Declarative description of a mean-field game instance.

An :class:`AgentModel` is an affine state map plus a quadratic private cost
over a polyhedral admissible set; a :class:`Coupling` maps the population
mean to a price-like trajectory; a :class:`MeanFieldCost` is the scalar cost
of the mean itself.  :func:`build_virtual_cost` constructs the extra
"supplier" cost phi whose gradient (Riesz convention, see :mod:`.space`)
equals N times the coupling map, which is what ties the game to the social
problem in :mod:`.social`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConstructionError,
    DimensionMismatchError,
    InfeasibilityError,
    UsageError,
)
from .space import Trajectory, TrajectorySpace, fd_gradient

__all__ = [
    "NoiseSpec",
    "AgentModel",
    "Coupling",
    "MeanFieldCost",
    "GameInstance",
    "VirtualCost",
    "state_of",
    "agent_cost",
    "build_virtual_cost",
]

STATE_MEAN = "state-mean"
CONTROL_MEAN = "control-mean"


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Additive zero-mean state perturbation, independent across agents.

    kind is one of "gaussian", "uniform" (on [-scale, scale]) or
    "truncated-gaussian" (clipped at ``clip`` standard deviations).
    ``second_moment`` is the declared bound C on the weighted E||pi||^2;
    it is validated against the actual per-coordinate variance at agent
    construction.
    """

    kind: str
    scale: float
    second_moment: float
    clip: float = 3.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "truncated-gaussian"):
            raise UsageError(f"unknown noise kind {self.kind!r}")
        if self.scale < 0:
            raise UsageError("noise scale must be nonnegative")
        if self.kind == "truncated-gaussian" and self.clip <= 0:
            raise UsageError("truncation width must be positive")

    def coordinate_variance(self) -> float:
        if self.kind == "gaussian":
            return self.scale**2
        if self.kind == "uniform":
            return self.scale**2 / 3.0
        # Variance of a standard normal conditioned on |x| <= clip, scaled.
        from scipy.stats import truncnorm

        return float(self.scale**2 * truncnorm.var(-self.clip, self.clip))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal(size)
        if self.kind == "uniform":
            return rng.uniform(-self.scale, self.scale, size)
        draw = rng.standard_normal(size)
        # Redraw outside the window rather than clip, keeping the mean at zero.
        bad = np.abs(draw) > self.clip
        while np.any(bad):
            draw[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(draw) > self.clip
        return self.scale * draw


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentModel:
    """One agent: affine state map, quadratic private cost, polyhedral set.

    The state is ``x = state_matrix @ u + state_offset (+ noise)`` and the
    private cost is ``u' Q u + q' u + cost_const``.  The admissible set is a
    box, optionally intersected with one linear equality ``e . u = gamma``
    and inequalities ``G u <= h``.
    """

    space: TrajectorySpace
    state_matrix: np.ndarray          # (T, m)
    state_offset: Trajectory          # (T,)
    cost_quad: np.ndarray             # (m, m) symmetric PSD
    cost_lin: np.ndarray              # (m,)
    box_lower: np.ndarray             # (m,)
    box_upper: np.ndarray             # (m,)
    equality: tuple[np.ndarray, float] | None = None
    inequalities: tuple[np.ndarray, np.ndarray] | None = None
    noise: NoiseSpec | None = None
    cost_const: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.state_matrix, dtype=float)
        object.__setattr__(self, "state_matrix", A)
        object.__setattr__(self, "cost_quad", np.asarray(self.cost_quad, dtype=float))
        object.__setattr__(self, "cost_lin", np.asarray(self.cost_lin, dtype=float))
        object.__setattr__(self, "box_lower", np.asarray(self.box_lower, dtype=float))
        object.__setattr__(self, "box_upper", np.asarray(self.box_upper, dtype=float))

        m = self.control_dim
        if A.ndim != 2 or A.shape != (self.space.dim, m):
            raise DimensionMismatchError(
                f"state matrix shape {A.shape} != ({self.space.dim}, {m})"
            )
        if self.state_offset.space.dim != self.space.dim:
            raise DimensionMismatchError("state offset lives in the wrong space")
        if self.cost_quad.shape != (m, m) or self.cost_lin.shape != (m,):
            raise DimensionMismatchError("cost shapes inconsistent with control dim")
        if self.box_lower.shape != (m,) or self.box_upper.shape != (m,):
            raise DimensionMismatchError("box bounds inconsistent with control dim")

        sym_gap = float(np.max(np.abs(self.cost_quad - self.cost_quad.T))) if m else 0.0
        scale = 1.0 + float(np.max(np.abs(self.cost_quad))) if m else 1.0
        if sym_gap > 1e-10 * scale:
            raise ConstructionError("cost_quad is not symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (self.cost_quad + self.cost_quad.T))
        if eigs.size and eigs.min() < -1e-10 * scale:
            raise ConstructionError(f"cost_quad not PSD (min eigenvalue {eigs.min():.3e})")

        if np.any(self.box_lower > self.box_upper):
            raise ConstructionError("box_lower exceeds box_upper")
        if self.equality is not None:
            e, gamma = self.equality
            e = np.asarray(e, dtype=float)
            if e.shape != (m,):
                raise DimensionMismatchError("equality row has wrong length")
            object.__setattr__(self, "equality", (e, float(gamma)))
        if self.inequalities is not None:
            G, h = self.inequalities
            G = np.asarray(G, dtype=float)
            h = np.asarray(h, dtype=float)
            if G.ndim != 2 or G.shape[1] != m or h.shape != (G.shape[0],):
                raise DimensionMismatchError("inequality shapes inconsistent")
            object.__setattr__(self, "inequalities", (G, h))
        if self.noise is not None:
            weighted_sq = self.noise.coordinate_variance() * float(self.space.weights.sum())
            if weighted_sq > self.noise.second_moment * (1 + 1e-9):
                raise ConstructionError(
                    f"noise second moment {weighted_sq:.6g} exceeds declared bound "
                    f"{self.noise.second_moment:.6g}"
                )
        # Certify a nonempty feasible set by projecting the box midpoint.
        from .bestresponse import project_feasible

        mid = 0.5 * (np.where(np.isfinite(self.box_lower), self.box_lower, -1.0)
                     + np.where(np.isfinite(self.box_upper), self.box_upper, 1.0))
        try:
            probe = project_feasible(self, mid)
        except InfeasibilityError as exc:
            raise ConstructionError(f"admissible set certified empty: {exc}") from exc
        if not self.contains(probe, tol=1e-6):
            raise ConstructionError("projection failed to certify a feasible point")

    @property
    def control_dim(self) -> int:
        return int(np.asarray(self.cost_lin).size)

    def contains(self, u: np.ndarray, tol: float = 1e-8) -> bool:
        u = np.asarray(u)
        span = 1.0 + float(np.max(np.abs(u), initial=0.0))
        if np.any(u < self.box_lower - tol * span) or np.any(u > self.box_upper + tol * span):
            return False
        if self.equality is not None:
            e, gamma = self.equality
            if abs(float(e @ u) - gamma) > tol * max(1.0, abs(gamma)):
                return False
        if self.inequalities is not None:
            G, h = self.inequalities
            if np.any(G @ u > h + tol * (1.0 + np.abs(h))):
                return False
        return True

    def expected_state_values(self, u: np.ndarray) -> np.ndarray:
        return self.state_matrix @ np.asarray(u, dtype=float) + self.state_offset.values

    def private_cost(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.cost_quad @ u + self.cost_lin @ u + self.cost_const)


def state_of(agent: AgentModel, u: np.ndarray, noise_sample: np.ndarray | None = None) -> Trajectory:
    """State trajectory induced by a control, optionally with a noise draw."""
    u = np.asarray(u, dtype=float)
    if u.shape != (agent.control_dim,):
        raise DimensionMismatchError(
            f"control length {u.shape} != ({agent.control_dim},)"
        )
    values = agent.expected_state_values(u)
    if noise_sample is not None:
        noise_sample = np.asarray(noise_sample, dtype=float)
        if noise_sample.shape != (agent.space.dim,):
            raise DimensionMismatchError("noise sample has wrong length")
        values = values + noise_sample
    return agent.space.wrap(values)


# ---------------------------------------------------------------------------
# Coupling and mean-field cost
# ---------------------------------------------------------------------------

def _sample_points(space: TrajectorySpace, rng: np.random.Generator,
                   domain: tuple[float, float] | None) -> np.ndarray:
    if domain is None:
        return rng.standard_normal(space.dim)
    lo, hi = domain
    return rng.uniform(lo, hi, space.dim)


@dataclass(frozen=True)
class Coupling:
    """Mean-field coupling map F with declared Lipschitz constant.

    ``target`` selects whether F is fed the mean of the expected states or
    the mean of the controls.  ``pointwise`` marks maps whose k-th output
    depends only on the k-th input (all the bundled cases), which unlocks
    scalar root-finding in the proximal solvers.  ``jacobian`` returns the
    coordinate Jacobian dF_i/dz_j when a closed form exists.
    """

    space: TrajectorySpace
    map: Callable[[Trajectory], Trajectory]
    lipschitz: float
    monotone: bool
    target: str = STATE_MEAN
    jacobian: Callable[[Trajectory], np.ndarray] | None = None
    affine: bool = False
    pointwise: bool = False
    sample_domain: tuple[float, float] | None = None
    name: str = ""
    check_pairs: int = 100

    def __post_init__(self):
        if self.target not in (STATE_MEAN, CONTROL_MEAN):
            raise UsageError(f"unknown coupling target {self.target!r}")
        if self.lipschitz < 0:
            raise UsageError("Lipschitz constant must be nonnegative")
        if self.check_pairs:
            rng = np.random.default_rng(20240 + self.space.dim)
            worst = 0.0
            for _ in range(self.check_pairs):
                a = _sample_points(self.space, rng, self.sample_domain)
                b = _sample_points(self.space, rng, self.sample_domain)
                da = self.space.norm(a - b)
                if da == 0.0:
                    continue
                fa = self(self.space.wrap(a)).values
                fb = self(self.space.wrap(b)).values
                worst = max(worst, self.space.norm(fa - fb) / da)
            if worst > self.lipschitz * 1.05 + 1e-12:
                raise ConstructionError(
                    f"sampled Lipschitz ratio {worst:.6g} exceeds declared "
                    f"{self.lipschitz:.6g} by more than 5%"
                )

    def __call__(self, z: Trajectory) -> Trajectory:
        out = self.map(z)
        if not isinstance(out, Trajectory):
            out = z.space.wrap(np.asarray(out, dtype=float))
        return out

    def jacobian_at(self, z: Trajectory, rel_step: float = 1e-6) -> np.ndarray:
        """Coordinate Jacobian of F at z (closed form or central differences)."""
        if self.jacobian is not None:
            return np.asarray(self.jacobian(z), dtype=float)
        base = z.values
        T = base.size
        J = np.zeros((T, T))
        for k in range(T):
            h = rel_step * (1.0 + abs(base[k]))
            up = base.copy()
            up[k] += h
            dn = base.copy()
            dn[k] -= h
            J[:, k] = (self(z.space.wrap(up)).values - self(z.space.wrap(dn)).values) / (2 * h)
        return J


@dataclass(frozen=True)
class MeanFieldCost:
    """Scalar cost of the population mean with a Lipschitz gradient.

    ``grad`` must follow the library's Riesz convention.  ``quadratic``
    declares that the coordinate Hessian is constant, which lets cost
    evaluation under noise use exact second-order corrections.
    """

    space: TrajectorySpace
    g: Callable[[Trajectory], float]
    grad_g: Callable[[Trajectory], Trajectory]
    grad_lipschitz: float
    quadratic: bool = False
    sample_domain: tuple[float, float] | None = None
    check_points: int = 5

    def __post_init__(self):
        if self.grad_lipschitz < 0:
            raise UsageError("gradient Lipschitz constant must be nonnegative")
        rng = np.random.default_rng(31337 + self.space.dim)
        for _ in range(self.check_points):
            z = self.space.wrap(_sample_points(self.space, rng, self.sample_domain))
            declared = self.grad(z)
            fd = fd_gradient(self.value, z)
            err = self.space.norm(declared.values - fd.values)
            if err > 1e-4 * (1.0 + self.space.norm(declared.values)):
                raise ConstructionError(
                    f"declared gradient disagrees with finite differences ({err:.3e})"
                )

    def value(self, z: Trajectory) -> float:
        return float(self.g(z))

    def grad(self, z: Trajectory) -> Trajectory:
        out = self.grad_g(z)
        if not isinstance(out, Trajectory):
            out = z.space.wrap(np.asarray(out, dtype=float))
        return out

    def euclidean_hessian(self, z: Trajectory, step: float = 1e-4) -> np.ndarray:
        """Coordinate Hessian d^2 g / dz_i dz_j via differences of the gradient."""
        w = self.space.weights
        base = z.values
        T = base.size
        H = np.zeros((T, T))
        for k in range(T):
            h = step * (1.0 + abs(base[k]))
            up = base.copy()
            up[k] += h
            dn = base.copy()
            dn[k] -= h
            gu = self.grad(z.space.wrap(up)).values * w
            gd = self.grad(z.space.wrap(dn)).values * w
            H[:, k] = (gu - gd) / (2 * h)
        return 0.5 * (H + H.T)


def zero_mean_field_cost(space: TrajectorySpace) -> MeanFieldCost:
    return MeanFieldCost(
        space=space,
        g=lambda z: 0.0,
        grad_g=lambda z: space.zero(),
        grad_lipschitz=0.0,
        quadratic=True,
        check_points=1,
    )


# ---------------------------------------------------------------------------
# Game instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GameInstance:
    """N agents, one coupling and one mean-field cost over a shared space."""

    agents: tuple[AgentModel, ...]
    coupling: Coupling
    mf_cost: MeanFieldCost
    space: TrajectorySpace

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if len(self.agents) < 1:
            raise UsageError("a game needs at least one agent")
        for a in self.agents:
            if a.space is not self.space and not np.array_equal(a.space.weights, self.space.weights):
                raise DimensionMismatchError("all agents must share the game's space")
            if self.coupling.target == CONTROL_MEAN and a.control_dim != self.space.dim:
                raise DimensionMismatchError(
                    "control-mean coupling requires control dim == space dim"
                )

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def has_noise(self) -> bool:
        return any(a.noise is not None for a in self.agents)

    def exposure_values(self, i: int, u_i: np.ndarray) -> np.ndarray:
        """The trajectory paired with the price in agent i's cost."""
        if self.coupling.target == CONTROL_MEAN:
            return np.asarray(u_i, dtype=float)
        return self.agents[i].expected_state_values(u_i)

    def exposure_matrix(self, i: int) -> np.ndarray:
        if self.coupling.target == CONTROL_MEAN:
            return np.eye(self.space.dim)
        return self.agents[i].state_matrix

    def aggregate_mean_values(self, controls: Sequence[np.ndarray]) -> np.ndarray:
        """(1/N) sum of exposures, reduced in fixed agent order."""
        if len(controls) != self.n:
            raise DimensionMismatchError("one control per agent required")
        acc = np.zeros(self.space.dim)
        for i, u in enumerate(controls):
            acc = acc + self.exposure_values(i, u)
        return acc / self.n

    def aggregate_mean(self, controls: Sequence[np.ndarray]) -> Trajectory:
        return self.space.wrap(self.aggregate_mean_values(controls))


def _check_controls(game: GameInstance, controls: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(controls) != game.n:
        raise DimensionMismatchError(
            f"expected {game.n} controls, got {len(controls)}"
        )
    out = []
    for agent, u in zip(game.agents, controls):
        u = np.asarray(u, dtype=float)
        if u.shape != (agent.control_dim,):
            raise DimensionMismatchError("control length mismatch")
        out.append(u)
    return out


def agent_cost(
    game: GameInstance,
    i: int,
    controls: Sequence[np.ndarray],
    mc: int | None = None,
    seed: int = 0,
) -> float:
    """Cost of agent i at a full control profile.

    Expectations over the noise are exact when no noise is present, when the
    coupling targets the control mean (states never enter the cost), or when
    the coupling is affine and the mean-field cost quadratic (second-order
    corrections are then exact).  Passing ``mc`` forces a seeded Monte-Carlo
    evaluation instead.
    """
    if not 0 <= i < game.n:
        raise UsageError(f"agent index {i} out of range")
    controls = _check_controls(game, controls)
    agent = game.agents[i]
    private = agent.private_cost(controls[i])

    mean_vals = game.aggregate_mean_values(controls)
    mean = game.space.wrap(mean_vals)
    expo = game.exposure_values(i, controls[i])

    noisy = game.has_noise and game.coupling.target == STATE_MEAN
    if not noisy or mc is None:
        price = game.coupling(mean).values
        base = private + game.space.dot(price, expo) + game.mf_cost.value(mean)
        if not noisy:
            return base
        # Exact second-order corrections for affine F / quadratic G; for other
        # couplings the caller must request Monte Carlo.
        if not (game.coupling.affine and game.mf_cost.quadratic):
            raise UsageError(
                "noisy instance with nonlinear coupling or non-quadratic mean cost: "
                "pass mc= for a Monte-Carlo evaluation"
            )
        w = game.space.weights
        JF = game.coupling.jacobian_at(mean)
        var_i = game.agents[i].noise.coordinate_variance() if game.agents[i].noise else 0.0
        corr_f = var_i * float(np.trace(w[:, None] * JF)) / game.n
        HG = game.mf_cost.euclidean_hessian(mean)
        total_var = sum(
            (a.noise.coordinate_variance() if a.noise else 0.0) for a in game.agents
        )
        corr_g = 0.5 * total_var * float(np.trace(HG)) / game.n**2
        return base + corr_f + corr_g

    # Monte Carlo over all agents' noise, deterministic given the seed.
    rng = np.random.default_rng((int(seed), 9173))
    total = 0.0
    states_mean = np.stack([a.expected_state_values(u) for a, u in zip(game.agents, controls)])
    for _ in range(mc):
        draws = np.zeros_like(states_mean)
        for j, a in enumerate(game.agents):
            if a.noise is not None:
                draws[j] = a.noise.sample(rng, game.space.dim)
        states = states_mean + draws
        xbar = game.space.wrap(states.mean(axis=0))
        price = game.coupling(xbar).values
        total += game.space.dot(price, states[i]) + game.mf_cost.value(xbar)
    return private + total / mc


# ---------------------------------------------------------------------------
# Virtual cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VirtualCost:
    """Supplier cost phi with gradient (Riesz convention) equal to n F.

    ``argmin_shifted(lam)`` solves ``min_z phi(z) - n lam . z`` and returns
    ``(z, value)`` or None when the subproblem is unbounded below;
    ``prox(a, rho)`` solves ``min_z phi(z) + (n rho / 2) ||z - a||^2``.
    Either may be attached in closed form by a case generator; generic
    fallbacks based on the coupling structure are used otherwise.
    """

    n: int
    coupling: Coupling
    phi: Callable[[Trajectory], float]
    closed_form: bool = False
    phi0: float = 0.0
    argmin_shifted: Callable[[Trajectory], tuple[Trajectory, float] | None] | None = None
    prox: Callable[[Trajectory, float], Trajectory] | None = None

    def value(self, z: Trajectory) -> float:
        return float(self.phi(z))

    def grad(self, z: Trajectory) -> Trajectory:
        return z.space.wrap(self.n * self.coupling(z).values)


def _simpson_nodes(intervals: int = 64) -> tuple[np.ndarray, np.ndarray]:
    s = np.linspace(0.0, 1.0, intervals + 1)
    w = np.ones(intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return s, w / (3.0 * intervals)


def build_virtual_cost(
    coupling: Coupling,
    n: int,
    closed_form: Callable[[Trajectory], float] | None = None,
    phi0: float = 0.0,
    argmin_shifted=None,
    prox=None,
    conservative_tol: float = 1e-4,
    check_points: int = 20,
) -> VirtualCost:
    """Construct the supplier cost phi with gradient n F.

    Without a closed form, phi is the line integral
    ``phi(z) = phi0 + n * integral_0^1 F(s z) . z ds`` (64-interval composite
    Simpson), which is exact for the gradient condition whenever F is a
    conservative field in the space's geometry.  Conservativeness is checked
    through the weighted Jacobian symmetry at sampled points; a failure names
    the worst coordinate pair.
    """
    if n < 1:
        raise UsageError("n must be >= 1")
    space = coupling.space
    rng = np.random.default_rng(4242 + space.dim)

    if closed_form is None:
        w = space.weights
        for _ in range(3):
            z = space.wrap(_sample_points(space, rng, coupling.sample_domain))
            J = coupling.jacobian_at(z)
            WJ = w[:, None] * J
            asym = WJ - WJ.T
            tol = conservative_tol * (1.0 + float(np.max(np.abs(WJ))))
            if float(np.max(np.abs(asym))) > tol:
                i, j = np.unravel_index(np.argmax(np.abs(asym)), asym.shape)
                raise ConstructionError(
                    "coupling is not conservative in the weighted geometry: "
                    f"asymmetry {asym[i, j]:.3e} at coordinates ({i}, {j}); "
                    "supply a closed-form phi instead"
                )
        s_nodes, s_weights = _simpson_nodes(64)

        def phi(z: Trajectory, _s=s_nodes, _w=s_weights) -> float:
            vals = z.values
            acc = 0.0
            for s, wt in zip(_s, _w):
                acc += wt * space.dot(coupling(space.wrap(s * vals)).values, vals)
            return phi0 + n * acc

        vc = VirtualCost(n=n, coupling=coupling, phi=phi, closed_form=False,
                         phi0=phi0, argmin_shifted=argmin_shifted, prox=prox)
    else:
        vc = VirtualCost(n=n, coupling=coupling, phi=closed_form, closed_form=True,
                         phi0=phi0, argmin_shifted=argmin_shifted, prox=prox)

    verify_gradient_condition(vc, points=check_points, tol=1e-4, rng=rng)
    return vc


def verify_gradient_condition(
    vc: VirtualCost,
    points: int = 20,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Check ||fd-grad phi(z) - n F(z)|| <= tol * (1 + ||n F(z)||) at samples."""
    space = vc.coupling.space
    if rng is None:
        rng = np.random.default_rng(777)
    worst = 0.0
    for _ in range(points):
        z = space.wrap(_sample_points(space, rng, vc.coupling.sample_domain))
        fd = fd_gradient(vc.value, z)
        target = vc.grad(z)
        err = space.norm(fd.values - target.values)
        rel = err / (1.0 + space.norm(target.values))
        worst = max(worst, rel)
        if rel > tol:
            raise ConstructionError(
                f"virtual cost gradient check failed: relative error {rel:.3e}"
            )
    return worst
