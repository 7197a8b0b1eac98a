"""Mean-field games on discretized weighted inner-product spaces.

Build a game from agents, a coupling map, and a mean-field cost; compute its
equilibrium by fixed-point, primal-dual, or ADMM iteration; and certify the
result against the constructed social-welfare problem through duality gaps,
deviation gains, and rate studies.
"""

from .bestresponse import (
    best_response,
    best_response_full,
    dykstra_project,
    knapsack_project,
)
from .cases import CaseBundle, EvParams, ev_game, log_game, routing_game, sine_game
from .config import game_from_config
from .equilibrium import (
    EquilibriumResult,
    SolverConfig,
    StepSchedule,
    mf_residual,
    solve_admm,
    solve_fixed_point,
    solve_primal_dual,
)
from .model import (
    AgentModel,
    Coupling,
    GameInstance,
    MeanFieldCost,
    NoiseSpec,
    VirtualCost,
    agent_cost,
    build_virtual_cost,
    state_of,
)
from .social import (
    SocialProblem,
    classical_social_solve,
    dual_value,
    duality_gap,
    lagrangian,
    social_cost,
    solve_social_direct,
)
from .space import Trajectory, TrajectorySpace, inner, mean_of, norm
from .verify import (
    epsilon_nash,
    epsilon_rate_study,
    equivalence_report,
    lemma1_rate,
    lemma2_rate,
    lipschitz_estimate,
    monotone_check,
    potential_game_check,
)

__version__ = "0.1.0"
