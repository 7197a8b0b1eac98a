"""Load game instances from bracketed key-value config text.

Schema (all values are scalars or comma-separated arrays)::

    [space]
    dim = 4
    weights = 1,1,1,1
    grid = 0,1,2,3

    [coupling]
    kind = affine          ; affine | sine | log | zero
    gain = 2.0             ; affine: F(z) = gain z + offset
    offset = 0.0
    kappa = 1.5            ; sine: F_t(z) = kappa exp(-t) sin(z_t)
    target = state-mean    ; or control-mean

    [mf_cost]
    kind = quadratic       ; quadratic | zero
    coeff = 0.1            ; quadratic: G(z) = coeff <z, z>

    [agents]
    mode = inline          ; inline | generated
    count = 2              ; generated mode: count + seed + the ranges below
    seed = 0
    quad = 0.5             ; diagonal curvature drawn around this value
    box = 0,1
    demand = 0.5,1.5       ; optional sum-equality target range

    [agent.0]              ; inline mode: one block per agent
    quad = 1,1,1,1         ; diagonal of the control curvature
    lin = 0,0,0,0
    box_lower = 0,0,0,0
    box_upper = 1,1,1,1
    demand = 2.0           ; optional sum equality
"""

from __future__ import annotations

import configparser

import numpy as np

from .errors import UsageError
from .model import (
    AgentModel,
    Coupling,
    GameInstance,
    MeanFieldCost,
    zero_mean_field_cost,
)
from .space import TrajectorySpace, space_from_config

__all__ = ["game_from_config", "coupling_from_config"]


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in str(text).split(",")])


def coupling_from_config(block, space: TrajectorySpace) -> Coupling:
    kind = block.get("kind", "zero")
    target = block.get("target", "state-mean")
    T = space.dim
    if kind == "affine":
        gain = float(block.get("gain", 1.0))
        offset = float(block.get("offset", 0.0))
        return Coupling(space=space,
                        map=lambda z: space.wrap(gain * z.values + offset),
                        lipschitz=abs(gain), monotone=gain >= 0.0,
                        target=target, affine=True, pointwise=True,
                        jacobian=lambda z: gain * np.eye(T))
    if kind == "sine":
        kappa = float(block.get("kappa", 1.0))
        decay = np.exp(-space.grid)
        return Coupling(space=space,
                        map=lambda z: space.wrap(kappa * decay * np.sin(z.values)),
                        lipschitz=kappa * float(decay.max()), monotone=False,
                        target=target, pointwise=True,
                        jacobian=lambda z: np.diag(kappa * decay * np.cos(z.values)))
    if kind == "log":
        return Coupling(space=space, map=lambda z: space.wrap(np.log(z.values)),
                        lipschitz=10.0, monotone=True, target=target,
                        pointwise=True, sample_domain=(0.1, 10.0),
                        jacobian=lambda z: np.diag(1.0 / z.values))
    if kind == "zero":
        return Coupling(space=space, map=lambda z: space.zero(), lipschitz=0.0,
                        monotone=True, target=target, affine=True,
                        pointwise=True, jacobian=lambda z: np.zeros((T, T)))
    raise UsageError(f"unknown coupling kind {kind!r}")


def _mf_cost_from_config(parser, space: TrajectorySpace) -> MeanFieldCost:
    if "mf_cost" not in parser:
        return zero_mean_field_cost(space)
    block = parser["mf_cost"]
    kind = block.get("kind", "zero")
    if kind == "zero":
        return zero_mean_field_cost(space)
    if kind == "quadratic":
        coeff = float(block.get("coeff", 1.0))
        return MeanFieldCost(
            space=space,
            g=lambda z: coeff * space.dot(z.values, z.values),
            grad_g=lambda z: space.wrap(2.0 * coeff * z.values),
            grad_lipschitz=2.0 * abs(coeff),
            quadratic=True,
        )
    raise UsageError(f"unknown mf_cost kind {kind!r}")


def _inline_agent(block, space: TrajectorySpace) -> AgentModel:
    T = space.dim
    quad = _floats(block.get("quad", "1")) * np.ones(T)
    lin = _floats(block.get("lin", "0")) * np.ones(T)
    lo = _floats(block.get("box_lower", "0")) * np.ones(T)
    hi = _floats(block.get("box_upper", "1")) * np.ones(T)
    eq = None
    if "demand" in block:
        eq = (np.ones(T), float(block["demand"]))
    return AgentModel(space=space, state_matrix=np.eye(T),
                      state_offset=space.zero(), cost_quad=np.diag(quad),
                      cost_lin=lin, box_lower=lo, box_upper=hi, equality=eq)


def _generated_agents(block, space: TrajectorySpace) -> list[AgentModel]:
    T = space.dim
    count = int(block.get("count", 2))
    seed = int(block.get("seed", 0))
    rng = np.random.default_rng((seed, 2027))
    quad_center = float(block.get("quad", 1.0))
    lo, hi = _floats(block.get("box", "0,1"))
    demand_range = _floats(block["demand"]) if "demand" in block else None
    agents = []
    for _ in range(count):
        quad = quad_center * rng.uniform(0.5, 1.5)
        eq = None
        if demand_range is not None:
            eq = (np.ones(T), float(rng.uniform(*demand_range)))
        agents.append(AgentModel(
            space=space, state_matrix=np.eye(T), state_offset=space.zero(),
            cost_quad=quad * np.eye(T), cost_lin=rng.uniform(-1, 1, T),
            box_lower=np.full(T, lo), box_upper=np.full(T, hi), equality=eq,
        ))
    return agents


def game_from_config(text: str) -> GameInstance:
    """Build a game from the [space]/[coupling]/[mf_cost]/[agents] sections."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "space" not in parser:
        raise UsageError("game config needs a [space] section")
    space = space_from_config(text)
    if "coupling" not in parser:
        raise UsageError("game config needs a [coupling] section")
    coupling = coupling_from_config(parser["coupling"], space)
    mf_cost = _mf_cost_from_config(parser, space)

    if "agents" not in parser:
        raise UsageError("game config needs an [agents] section")
    mode = parser["agents"].get("mode", "inline")
    if mode == "generated":
        agents = _generated_agents(parser["agents"], space)
    elif mode == "inline":
        blocks = sorted(s for s in parser.sections() if s.startswith("agent."))
        if not blocks:
            raise UsageError("inline mode needs [agent.K] sections")
        agents = [_inline_agent(parser[s], space) for s in blocks]
    else:
        raise UsageError(f"unknown agents mode {mode!r}")
    return GameInstance(agents=tuple(agents), coupling=coupling,
                        mf_cost=mf_cost, space=space)
