"""
Environment dynamics, collision and goal predicates, task generation,
preference functions and the chasing game
"""
import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from shapely.geometry import Point, box

from .exceptions import ContractError, DensityError, NumericError
from .models import (
    AGENT_RADIUS, Backbone, EnvKind, Observation,
    TaskMode, TaskSpec, WorldState,
)

logger = logging.getLogger(__name__)

GRAVITY = 9.8
COLLISION_DISTANCE = 0.3
GOAL_DISTANCE = 0.45
SINGLE_AGENT_GOAL_DISTANCE = 0.3
PLACEMENT_CLEARANCE = 0.31
MAX_PLACEMENT_ATTEMPTS = 10_000

SINGLE_AGENT_START = (0.0, -1.7)
SINGLE_AGENT_GOAL = (0.0, 1.7)
SINGLE_AGENT_MAP = 6.0

# (x_min, y_min, x_max, y_max): three blocks leaving two narrow passages
DEFAULT_DANGER_REGIONS: Tuple[Tuple[float, float, float, float], ...] = (
    (-3.0, -0.25, -1.1, 0.25),
    (-0.5, -0.25, 0.5, 0.25),
    (1.1, -0.25, 3.0, 0.25),
)

_CLAMPS: Counter = Counter()
_CLAMPS_LOCK = threading.Lock()


@dataclass(frozen=True)
class EnvironmentProfile:
    """Constants every module needs about one environment"""
    kind: EnvKind
    state_dim: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    backbone: Backbone
    horizon: int
    margins: Tuple[float, float, float]
    update_every: int
    feature_dim: int

    @property
    def action_dim(self) -> int:
        return len(self.action_low)

    @property
    def low(self) -> np.ndarray:
        return np.array(self.action_low)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.action_high)

    @property
    def half_width(self) -> np.ndarray:
        return (self.high - self.low) / 2.0

    def sample_actions(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n candidate actions drawn uniformly in the action box"""
        return rng.uniform(self.low, self.high, size=(n, self.action_dim))


_TURN = 2.0 * np.pi / 3.0

PROFILES: Dict[EnvKind, EnvironmentProfile] = {
    EnvKind.CAR: EnvironmentProfile(
        EnvKind.CAR, 3, (-_TURN,), (_TURN,), Backbone.GNN, 128, (0.0, 2e-2, 1e-2), 10, 8),
    EnvKind.DYNAMIC_DUBINS: EnvironmentProfile(
        EnvKind.DYNAMIC_DUBINS, 4, (-1.0, -1.0), (1.0, 1.0), Backbone.GNN, 256, (0.0, 2e-2, 1e-2), 10, 10),
    EnvKind.DRONE: EnvironmentProfile(
        EnvKind.DRONE, 9, (-1.0,) * 4, (1.0,) * 4, Backbone.GNN, 256, (0.0, 1e-1, 1e-2), 20, 19),
    EnvKind.INTEGRATOR: EnvironmentProfile(
        EnvKind.INTEGRATOR, 2, (-1.0, -1.0), (1.0, 1.0), Backbone.MLP, 128, (0.0, 2e-2, 1e-2), 10, 2),
    EnvKind.DUBINS_SINGLE: EnvironmentProfile(
        EnvKind.DUBINS_SINGLE, 4, (-1.0, -1.0), (1.0, 1.0), Backbone.MLP, 256, (0.0, 2e-2, 1e-2), 10, 5),
}


def profile(kind: EnvKind) -> EnvironmentProfile:
    try:
        return PROFILES[kind]
    except KeyError:
        raise ContractError(f"unknown environment kind: {kind}")


def clamp_action(kind: EnvKind, actions: np.ndarray) -> np.ndarray:
    """Clip actions into the environment's box, counting every clipped row"""
    prof = profile(kind)
    actions = np.asarray(actions, dtype=np.float64)
    clipped = np.clip(actions, prof.low, prof.high)
    outside = np.any(clipped != actions, axis=-1)
    n_outside = int(np.count_nonzero(outside))
    if n_outside:
        with _CLAMPS_LOCK:
            _CLAMPS[kind] += n_outside
        logger.debug(f"{kind.value}: clamped {n_outside} out-of-box action(s)")
    return clipped


def clamp_count(kind: Optional[EnvKind] = None) -> int:
    """Number of clamped actions seen so far, for one environment or in total"""
    with _CLAMPS_LOCK:
        return _CLAMPS[kind] if kind is not None else sum(_CLAMPS.values())


def reset_clamp_count() -> None:
    with _CLAMPS_LOCK:
        _CLAMPS.clear()


def _wrap_angle(theta: np.ndarray) -> np.ndarray:
    return np.mod(theta, 2.0 * np.pi)


def step_car(state: np.ndarray, action: np.ndarray, dt: float = 1.0, speed: float = 0.05) -> np.ndarray:
    """
    Dubins car with constant speed; state [p_x, p_y, θ], action [θ̇]

    Vectorized over leading dimensions of state and action.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if action.ndim == 0:
        action = action.reshape(1)
    action = clamp_action(EnvKind.CAR, action)
    heading = state[..., 2] + action[..., 0] * dt
    return np.stack([
        state[..., 0] + speed * np.sin(heading),
        state[..., 1] + speed * np.cos(heading),
        _wrap_angle(heading),
    ], axis=-1)


def step_dyn_dubins(state: np.ndarray, action: np.ndarray, dt: float = 0.05) -> np.ndarray:
    """
    Dynamic Dubins car; state [p_x, p_y, v, θ], action [q, θ̇]

    Positions advance with the current speed along the updated heading; the
    speed then integrates q and is clipped to [0, 1].
    """
    state = np.asarray(state, dtype=np.float64)
    action = clamp_action(EnvKind.DYNAMIC_DUBINS, action)
    speed = state[..., 2]
    heading = state[..., 3] + action[..., 1] * dt
    return np.stack([
        state[..., 0] + speed * dt * np.sin(heading),
        state[..., 1] + speed * dt * np.cos(heading),
        np.clip(speed + action[..., 0] * dt, 0.0, 1.0),
        _wrap_angle(heading),
    ], axis=-1)


def step_drone(state: np.ndarray, action: np.ndarray, dt: float = 0.01, k: int = 10,
               gravity: float = GRAVITY) -> np.ndarray:
    """
    Quadrotor point model integrated with k explicit Euler substeps

    State [p_x, p_y, p_z, v_x, v_y, v_z, α, β, γ]; action [q, α̇, β̇, γ̇] is used
    as given (the thrust is the full acceleration, so hovering needs q = g).
    No clipping or counting happens here: `advance` clamps drone actions to
    the box before adding the hover offset, which takes q outside the box.
    Velocities and angles are clipped once after the substeps.

    Args:
        state: (..., 9) states
        action: (..., 4) actions
        dt: Substep length
        k: Number of substeps
        gravity: Gravity acceleration

    Returns:
        Next states with the same shape as the input
    """
    x = np.array(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    q = action[..., 0]
    rates = action[..., 1:4]
    for _ in range(k):
        alpha, beta = x[..., 6], x[..., 7]
        accel = np.stack([
            -np.sin(beta) * q,
            np.cos(beta) * np.sin(alpha) * q,
            np.cos(beta) * np.cos(alpha) * q - gravity,
        ], axis=-1)
        velocity = x[..., 3:6].copy()
        x[..., 0:3] += velocity * dt
        x[..., 3:6] += accel * dt
        x[..., 6:9] += rates * dt
    x[..., 3:6] = np.clip(x[..., 3:6], -1.0, 1.0)
    x[..., 6:9] = np.clip(x[..., 6:9], -np.pi / 2, np.pi / 2)
    return x


def step_integrator(state: np.ndarray, action: np.ndarray, dt: float = 0.05) -> np.ndarray:
    """Single integrator p' = p + a·dt"""
    state = np.asarray(state, dtype=np.float64)
    return state + clamp_action(EnvKind.INTEGRATOR, action) * dt


def advance(kind: EnvKind, states: np.ndarray, actions: np.ndarray,
            thrust_offset: float = GRAVITY) -> np.ndarray:
    """
    One environment tick for states under in-box actions

    Drone actions are clipped to the box and then shifted by `thrust_offset`
    on the thrust channel before integration.
    """
    if kind is EnvKind.CAR:
        return step_car(states, actions)
    if kind in (EnvKind.DYNAMIC_DUBINS, EnvKind.DUBINS_SINGLE):
        return step_dyn_dubins(states, actions)
    if kind is EnvKind.INTEGRATOR:
        return step_integrator(states, actions)
    if kind is EnvKind.DRONE:
        actions = clamp_action(EnvKind.DRONE, actions).copy()
        actions[..., 0] += thrust_offset
        return step_drone(states, actions)
    raise ContractError(f"unknown environment kind: {kind}")


def region_collisions(positions: np.ndarray, regions: Sequence[Tuple[float, float, float, float]],
                      radius: float = AGENT_RADIUS) -> np.ndarray:
    """True where a disc of `radius` at the 2D position intersects any danger region"""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, positions.shape[-1])
    shapes = [box(*r) for r in regions]
    hits = np.zeros(len(positions), dtype=bool)
    for i, p in enumerate(positions):
        point = Point(p[0], p[1])
        hits[i] = any(point.distance(shape) < radius for shape in shapes)
    return hits


def check_collisions(world: WorldState) -> np.ndarray:
    """
    Per-agent collision flags

    An agent collides when another agent center is closer than 0.3, an
    obstacle center is closer than 0.3 (horizontal distance for drones), or
    its disc intersects a danger region.
    """
    n = world.n_agents
    collided = np.zeros(n, dtype=bool)
    if n == 0:
        return collided

    if n > 1:
        positions = world.positions
        gaps = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        collided |= np.any(gaps < COLLISION_DISTANCE, axis=1)

    if len(world.obstacles):
        planar = world.states[:, :2]
        gaps = np.linalg.norm(planar[:, None, :] - world.obstacles[None, :, :], axis=-1)
        collided |= np.any(gaps < AGENT_RADIUS + world.obstacle_radius, axis=1)

    if world.danger_regions:
        collided |= region_collisions(world.states[:, :2], world.danger_regions)
    return collided


def goal_threshold(kind: EnvKind) -> float:
    return SINGLE_AGENT_GOAL_DISTANCE if not kind.uses_graph else GOAL_DISTANCE


def check_goal(agent_state: np.ndarray, goal: np.ndarray, kind: EnvKind = EnvKind.CAR) -> bool:
    """Whether the agent's position lies strictly within the goal distance"""
    dims = kind.position_dims
    distance = np.linalg.norm(np.asarray(agent_state)[:dims] - np.asarray(goal)[:dims])
    return bool(distance < goal_threshold(kind))


def goal_flags(world: WorldState) -> np.ndarray:
    """Per-agent goal flags at this snapshot (not the sticky reached flags)"""
    if world.n_agents == 0:
        return np.zeros(0, dtype=bool)
    distances = np.linalg.norm(world.positions - world.goals, axis=1)
    return distances < goal_threshold(world.kind)


def goal_distances(world: WorldState) -> np.ndarray:
    return np.linalg.norm(world.positions - world.goals, axis=1)


@dataclass
class StepResult:
    """Successor world plus the per-agent outcome of one synchronous tick"""
    world: WorldState
    actions: np.ndarray
    collisions: np.ndarray
    at_goal: np.ndarray


def step_world(world: WorldState, actions: np.ndarray, thrust_offset: float = GRAVITY) -> StepResult:
    """
    Advance every agent one tick from the same snapshot

    Agents that already reached their goal in a navigation task hold their
    state. In a chasing task the goals move to the targets' new positions.

    Args:
        world: Current snapshot
        actions: (n_agents, action_dim) actions; clipped to the box
        thrust_offset: Drone hover offset added to the thrust channel

    Returns:
        StepResult with the successor world and its collision and goal flags
    """
    prof = profile(world.kind)
    actions = np.asarray(actions, dtype=np.float64).reshape(world.n_agents, prof.action_dim)
    actions = clamp_action(world.kind, actions)
    next_states = advance(world.kind, world.states, actions, thrust_offset)
    if world.mode is TaskMode.NAVIGATION:
        next_states = np.where(world.reached[:, None], world.states, next_states)

    successor = replace(world, states=next_states, t=world.t + 1)
    if world.mode is TaskMode.CHASING:
        successor = replace(successor, goals=chasing_retarget(successor))
    at_goal = goal_flags(successor)
    successor = replace(successor, reached=world.reached | at_goal)
    return StepResult(successor, actions, check_collisions(successor), at_goal)


def state_features(kind: EnvKind, state: np.ndarray) -> np.ndarray:
    """Raw feature vector of a single-agent state for the MLP backbone"""
    state = np.asarray(state, dtype=np.float64)
    if kind is EnvKind.INTEGRATOR:
        return state[..., :2].copy()
    if kind is EnvKind.DUBINS_SINGLE:
        theta = state[..., 3]
        return np.concatenate([
            state[..., :3], np.sin(theta)[..., None], np.cos(theta)[..., None],
        ], axis=-1)
    raise ContractError(f"environment {kind.value} observes graphs, not raw vectors")


def observe(world: WorldState, agent_id: int, radius: float = 1.5) -> Observation:
    """An agent's observation: its ego graph, or its raw feature vector"""
    if world.kind.uses_graph:
        from .graphs import build_ego_graph
        return build_ego_graph(world, agent_id, radius)
    return state_features(world.kind, world.states[agent_id])


def observe_all(world: WorldState, radius: float = 1.5) -> List[Observation]:
    return [observe(world, i, radius) for i in range(world.n_agents)]


def load_danger_regions(path: Union[str, Path]) -> Tuple[Tuple[float, float, float, float], ...]:
    """
    Read rectangular danger regions from a JSON file

    The file holds {"regions": [[x_min, y_min, x_max, y_max], ...]}.
    """
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Could not read danger regions from {path}: {e}")
        raise
    regions = []
    for i, r in enumerate(data.get('regions', [])):
        if len(r) != 4 or r[0] >= r[2] or r[1] >= r[3]:
            raise ContractError(f"danger region {i} is not [x_min, y_min, x_max, y_max]: {r}")
        regions.append(tuple(float(v) for v in r))
    return tuple(regions)


def _place(count: int, low: np.ndarray, high: np.ndarray, blockers: np.ndarray,
           rng: np.random.Generator, what: str) -> np.ndarray:
    """Rejection-sample `count` 2D points at least PLACEMENT_CLEARANCE from blockers and each other"""
    placed = [p for p in blockers]
    out = np.zeros((count, 2))
    for i in range(count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = rng.uniform(low, high)
            if not placed or np.min(np.linalg.norm(np.asarray(placed) - candidate, axis=1)) >= PLACEMENT_CLEARANCE:
                break
        else:
            logger.warning(f"gave up placing {what} {i} after {MAX_PLACEMENT_ATTEMPTS} attempts")
            raise DensityError(f"could not place {what} {i} of {count} without overlap")
        out[i] = candidate
        placed.append(candidate)
    return out


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly random permutation without fixed points (rejection sampling)"""
    if n < 2:
        raise ContractError("a chasing assignment needs at least two agents")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _sample_single_agent(spec: TaskSpec, rng: np.random.Generator,
                         regions: Sequence[Tuple[float, float, float, float]]) -> WorldState:
    if spec.n_agents != 1:
        raise ContractError(f"{spec.kind.value} is a single-agent environment, got {spec.n_agents} agents")
    goal = np.array([SINGLE_AGENT_GOAL])
    if spec.kind is EnvKind.INTEGRATOR:
        states = np.array([SINGLE_AGENT_START])
    else:
        start_x = rng.uniform(-0.25, 0.25)
        states = np.array([[start_x, SINGLE_AGENT_START[1], 0.0, np.pi / 2]])
    return WorldState(
        kind=spec.kind, states=states, goals=goal, obstacles=np.zeros((0, 2)),
        map_size=SINGLE_AGENT_MAP, danger_regions=tuple(regions),
    )


def sample_task(spec: TaskSpec, rng: Optional[np.random.Generator] = None,
                danger_regions: Optional[Sequence[Tuple[float, float, float, float]]] = None) -> WorldState:
    """
    Generate a random initial world for a task specification

    Agents, goals and obstacles are placed uniformly on [0, L]² with pairwise
    clearance of at least 0.31 (obstacles first, then agents, then goals).
    Drone altitudes are uniform in [0, L]. Single-agent environments use the
    fixed danger-region layout instead.

    Args:
        spec: Task parameters
        rng: Random generator; defaults to one seeded with spec.seed
        danger_regions: Layout for single-agent environments

    Returns:
        WorldState at t = 0

    Raises:
        DensityError: The entities cannot be placed without overlap
    """
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if not spec.kind.uses_graph:
        return _sample_single_agent(spec, rng, danger_regions or DEFAULT_DANGER_REGIONS)

    side = spec.map_size
    if side < 1:
        raise ContractError(f"map side must be >= 1, got {side}")
    footprint = (spec.n_agents + spec.n_obstacles) * np.pi * (PLACEMENT_CLEARANCE / 2) ** 2
    if footprint > side ** 2:
        raise DensityError(
            f"{spec.n_agents} agents and {spec.n_obstacles} obstacles cannot fit on a {side}x{side} map"
        )

    low, high = np.zeros(2), np.full(2, side)
    obstacles = _place(spec.n_obstacles, low, high, np.zeros((0, 2)), rng, 'obstacle')
    starts = _place(spec.n_agents, low, high, obstacles, rng, 'agent')
    n = spec.n_agents

    if spec.kind is EnvKind.CAR:
        states = np.column_stack([starts, rng.uniform(0, 2 * np.pi, n)])
    elif spec.kind is EnvKind.DYNAMIC_DUBINS:
        states = np.column_stack([starts, np.zeros(n), rng.uniform(0, 2 * np.pi, n)])
    else:
        states = np.zeros((n, 9))
        states[:, :2] = starts
        states[:, 2] = rng.uniform(0, side, n)

    targets = None
    if spec.mode is TaskMode.CHASING and n > 0:
        targets = derangement(n, rng)
        goals = states[targets, :spec.kind.position_dims]
    else:
        goals = _place(n, low, high, obstacles, rng, 'goal')
        if spec.kind is EnvKind.DRONE:
            goals = np.column_stack([goals, rng.uniform(0, side, n)])

    world = WorldState(
        kind=spec.kind, states=states.reshape(n, profile(spec.kind).state_dim),
        goals=goals.reshape(n, spec.kind.position_dims),
        obstacles=obstacles, map_size=side, mode=spec.mode, targets=targets,
    )
    logger.debug(f"sampled {spec.kind.value} task: {n} agents, {spec.n_obstacles} obstacles, seed {spec.seed}")
    return world


def preference_l2(world: WorldState, agent_id: int, goal: np.ndarray, action: np.ndarray) -> Union[float, np.ndarray]:
    """
    Negative squared distance between the next position and the goal

    `action` may be one action or an (N, action_dim) batch; the result is a
    float or an (N,) array accordingly.
    """
    prof = profile(world.kind)
    actions = np.asarray(action, dtype=np.float64)
    single = actions.ndim == 1
    actions = actions.reshape(-1, prof.action_dim)
    states = np.broadcast_to(world.states[agent_id], (len(actions), prof.state_dim))
    nxt = advance(world.kind, states, actions)
    dims = world.kind.position_dims
    scores = -np.sum((nxt[:, :dims] - np.asarray(goal)[:dims]) ** 2, axis=1)
    return float(scores[0]) if single else scores


def lqr_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
             tol: float = 1e-9, max_iter: int = 10_000) -> np.ndarray:
    """
    Discrete-time LQR gain by fixed-point iteration of the Riccati recurrence

    Args:
        A: State matrix (n, n)
        B: Input matrix (n, m)
        Q: State weight (n, n)
        R: Input weight (m, m)
        tol: Max-norm change of P that counts as converged
        max_iter: Iteration limit

    Returns:
        Gain K (m, n) with u = -K x

    Raises:
        NumericError: The recurrence did not converge
    """
    A, B, Q, R = (np.asarray(m, dtype=np.float64) for m in (A, B, Q, R))
    P = Q.copy()
    for iteration in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        if not np.all(np.isfinite(P_next)):
            raise NumericError("Riccati iteration produced non-finite values")
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            BtP = B.T @ P
            logger.debug(f"Riccati iteration converged after {iteration + 1} steps")
            return np.linalg.solve(R + BtP @ B, BtP @ A)
        P = P_next
    raise NumericError(f"Riccati iteration did not converge in {max_iter} steps")


def drone_linearization(step: float = 0.1, gravity: float = GRAVITY) -> Tuple[np.ndarray, np.ndarray]:
    """Euler-discretized drone model linearized at hover (zero state, q = g)"""
    A_c = np.zeros((9, 9))
    A_c[0:3, 3:6] = np.eye(3)
    A_c[3, 7] = -gravity
    A_c[4, 6] = gravity
    B_c = np.zeros((9, 4))
    B_c[5, 0] = 1.0
    B_c[6:9, 1:4] = np.eye(3)
    return np.eye(9) + step * A_c, step * B_c


@lru_cache(maxsize=4)
def _cached_drone_gain(step: float, gravity: float) -> np.ndarray:
    A, B = drone_linearization(step, gravity)
    gain = lqr_gain(A, B, np.eye(9), np.eye(4))
    gain.setflags(write=False)
    return gain


def drone_lqr_gain(step: float = 0.1, gravity: float = GRAVITY) -> np.ndarray:
    """The hover LQR gain with Q = I9, R = I4, computed once per (step, gravity)"""
    return _cached_drone_gain(float(step), float(gravity))


def lqr_action(agent_state: np.ndarray, goal: np.ndarray, gain: np.ndarray,
               feedforward: float = GRAVITY) -> np.ndarray:
    """Goal-reaching LQR action clipped to the drone action box"""
    target = np.zeros(9)
    target[:3] = np.asarray(goal, dtype=np.float64)[:3]
    control = -gain @ (np.asarray(agent_state, dtype=np.float64) - target)
    control[0] += feedforward
    prof = PROFILES[EnvKind.DRONE]
    return np.clip(control, prof.low, prof.high)


def preference_lqr_drone(agent_state: np.ndarray, goal: np.ndarray, action: np.ndarray,
                         gain: np.ndarray, feedforward: float = GRAVITY) -> Union[float, np.ndarray]:
    """Negative squared deviation of the action(s) from the clipped LQR action"""
    reference = lqr_action(agent_state, goal, gain, feedforward)
    actions = np.asarray(action, dtype=np.float64)
    scores = -np.sum((actions.reshape(-1, 4) - reference) ** 2, axis=1)
    return float(scores[0]) if actions.ndim == 1 else scores


def preferences(world: WorldState, agent_id: int, actions: np.ndarray,
                thrust_offset: float = GRAVITY) -> np.ndarray:
    """Preference scores ω of candidate actions for one agent"""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, profile(world.kind).action_dim)
    goal = world.goals[agent_id]
    if world.kind is EnvKind.DRONE:
        return preference_lqr_drone(
            world.states[agent_id], goal, actions, drone_lqr_gain(), feedforward=GRAVITY - thrust_offset,
        )
    return preference_l2(world, agent_id, goal, actions)


def chasing_reward(d_prev: float, d_cur: float) -> float:
    """Per-step chasing progress clip(d_prev - d_cur, 0, 2)"""
    return float(np.clip(d_prev - d_cur, 0.0, 2.0))


def chasing_retarget(world: WorldState) -> np.ndarray:
    """Goals moved onto the current positions of each agent's fixed target"""
    if world.targets is None:
        raise ContractError("world has no chasing assignment")
    return world.positions[world.targets].copy()


def trajectory_records(before: WorldState, result: StepResult) -> List[Dict[str, Any]]:
    """One JSON-friendly record per agent for a single tick"""
    return [
        {
            't': before.t,
            'agent': i,
            'state': before.states[i].tolist(),
            'action': result.actions[i].tolist(),
            'next_state': result.world.states[i].tolist(),
            'collision': bool(result.collisions[i]),
            'goal': bool(result.at_goal[i]),
        }
        for i in range(before.n_agents)
    ]
