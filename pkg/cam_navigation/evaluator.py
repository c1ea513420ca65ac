"""
Greedy deployment of trained CAMs: metrics, density sweeps, the chasing
game, forward-invariance analysis, decision timing and landscapes
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .admissibility import CamModel, Scorer
from .exceptions import ContractError
from .models import (
    AgentTrace, Metrics, Observation, Region, RegionClass, SubgraphCaps, TaskMode, TaskSpec,
)
from .trainer import EpisodeResult, RolloutOptions, rollout_episode
from .worlds import GRAVITY, chasing_reward, profile, sample_task

logger = logging.getLogger(__name__)

COLLISION_PENALTY = -1.0
GOAL_BONUS = 10.0
STEP_PENALTY = -0.1
TIMING_COLUMNS = ('mean_decision_ms', 'max_decision_ms')


def safety_rate(traces: Sequence[AgentTrace]) -> float:
    """Mean over agents of the fraction of collision-free timesteps"""
    if not traces:
        raise ContractError("safety rate needs at least one agent trace")
    rates = [1.0 - trace.collisions.sum() / trace.steps if trace.steps else 1.0 for trace in traces]
    return float(np.mean(rates))


def agent_reward(trace: AgentTrace) -> float:
    reward = COLLISION_PENALTY * int(trace.collisions.sum()) + STEP_PENALTY * trace.steps
    if trace.reached.any():
        reward += GOAL_BONUS
    return float(reward)


def episode_reward(traces: Sequence[AgentTrace]) -> float:
    """Navigation reward averaged over agents: -1 per collision step, +10 once at the goal, -0.1 per step"""
    if not traces:
        raise ContractError("episode reward needs at least one agent trace")
    return float(np.mean([agent_reward(trace) for trace in traces]))


def chasing_episode_reward(traces: Sequence[AgentTrace]) -> float:
    """Sum of clipped per-step distance improvements, averaged over agents"""
    if not traces:
        raise ContractError("chasing reward needs at least one agent trace")
    totals = []
    for trace in traces:
        d = trace.distances
        totals.append(sum(chasing_reward(d[t - 1], d[t]) for t in range(1, len(d))))
    return float(np.mean(totals))


@dataclass
class EvaluationResult:
    """Aggregate metrics plus the raw episodes they came from"""
    metrics: Metrics
    episodes: List[EpisodeResult] = field(default_factory=list)

    @property
    def records(self) -> List[Dict[str, Any]]:
        return [r for episode in self.episodes for r in episode.records]


def _evaluation_options(use_decomposition: bool, caps: Optional[SubgraphCaps], n_candidates: int,
                        horizon: int, chunk_size: Optional[int], record: bool,
                        keep_transitions: bool, thrust_offset: float) -> RolloutOptions:
    return RolloutOptions(
        n_candidates=n_candidates,
        horizon=horizon,
        noise_scale=0.0,
        epsilon=0.0,
        thrust_offset=thrust_offset,
        caps=(caps or SubgraphCaps()) if use_decomposition else None,
        chunk_size=chunk_size,
        record=record,
        keep_transitions=keep_transitions,
    )


def evaluate(model: CamModel, tasks: Sequence[TaskSpec], use_decomposition: bool = True,
             caps: Optional[SubgraphCaps] = None, seed: int = 0, n_candidates: int = 2000,
             chunk_size: Optional[int] = None, record: bool = False, keep_transitions: bool = False,
             workers: int = 1, thrust_offset: float = GRAVITY) -> EvaluationResult:
    """
    Greedy rollouts over a set of tasks

    Each task gets its own random stream spawned from `seed`, so results do
    not depend on `workers`.

    Args:
        model: Trained CAM
        tasks: Task specifications, all of the model's environment
        use_decomposition: Min-compose scores over decomposed subgraphs
        caps: Subgraph caps for the decomposition
        seed: Root seed of the per-task streams
        n_candidates: Candidate actions per agent per tick
        chunk_size: Enables adaptive early exit with this chunk size
        record: Keep per-(tick, agent) trajectory records
        keep_transitions: Keep visited states for invariance analysis
        workers: Parallel episodes

    Returns:
        EvaluationResult with the aggregate Metrics
    """
    if not tasks:
        raise ContractError("evaluation needs at least one task")
    for task in tasks:
        if task.kind is not model.kind:
            raise ContractError(f"model was trained on {model.kind.value}, task is {task.kind.value}")

    streams = np.random.SeedSequence(seed).spawn(len(tasks))

    def run(index: int) -> EpisodeResult:
        task = tasks[index]
        horizon = task.horizon or profile(task.kind).horizon
        options = _evaluation_options(use_decomposition, caps, n_candidates, horizon, chunk_size,
                                      record, keep_transitions, thrust_offset)
        world = sample_task(task)
        return rollout_episode(model, world, options, np.random.default_rng(streams[index]), episode_id=index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(run, range(len(tasks))))
    else:
        episodes = [run(i) for i in range(len(tasks))]

    metrics = aggregate(episodes, tasks)
    logger.info(
        f"evaluated {len(tasks)} task(s): safety {metrics.safety_rate:.4f}, "
        f"reward {metrics.mean_reward:.3f}, success {metrics.success_rate:.3f}"
    )
    return EvaluationResult(metrics, episodes)


def aggregate(episodes: Sequence[EpisodeResult], tasks: Sequence[TaskSpec]) -> Metrics:
    """Combine per-episode outcomes in task order"""
    safety, rewards, success, timings = [], [], [], []
    for episode, task in zip(episodes, tasks):
        if episode.n_agents == 0:
            continue
        safety.append(safety_rate(episode.traces))
        if task.mode is TaskMode.CHASING:
            rewards.append(chasing_episode_reward(episode.traces))
        else:
            rewards.append(episode_reward(episode.traces))
        success.append(episode.success)
        timings.extend(episode.decision_ms)
    return Metrics(
        safety_rate=float(np.mean(safety)) if safety else 1.0,
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
        success_rate=float(np.mean(success)) if success else 0.0,
        mean_decision_ms=float(np.mean(timings)) if timings else 0.0,
        max_decision_ms=float(np.max(timings)) if timings else 0.0,
        task_count=len(tasks),
        seeds=tuple(task.seed for task in tasks),
    )


def seeded_tasks(base: TaskSpec, n_tasks: int) -> List[TaskSpec]:
    """n_tasks copies of a spec with consecutive seeds starting at base.seed"""
    return [replace(base, seed=base.seed + i) for i in range(n_tasks)]


def run_chasing(model: CamModel, spec: TaskSpec, seed: int = 0, n_tasks: int = 1,
                use_decomposition: bool = True, caps: Optional[SubgraphCaps] = None,
                n_candidates: int = 2000, workers: int = 1) -> Metrics:
    """Zero-shot chasing game: every agent pursues a fixed other agent"""
    spec = replace(spec, mode=TaskMode.CHASING)
    spec.validate()
    if spec.n_agents < 2:
        raise ContractError("the chasing game needs at least two agents")
    result = evaluate(model, seeded_tasks(spec, n_tasks), use_decomposition, caps, seed,
                      n_candidates, workers=workers)
    return result.metrics


def density_sweep(model: CamModel, base_spec: TaskSpec, agent_counts: Sequence[int],
                  obstacle_counts: Sequence[int], seed: int = 0, n_tasks: int = 1,
                  use_decomposition: bool = True, caps: Optional[SubgraphCaps] = None,
                  n_candidates: int = 2000, workers: int = 1) -> pd.DataFrame:
    """
    Evaluate over an (agents x obstacles) grid

    Every cell reuses the same task seeds so rows are comparable.

    Returns:
        DataFrame with one row per cell: agents, obstacles and the metric columns
    """
    rows = []
    for n_agents in agent_counts:
        for n_obstacles in obstacle_counts:
            cell = replace(base_spec, n_agents=int(n_agents), n_obstacles=int(n_obstacles))
            metrics = evaluate(model, seeded_tasks(cell, n_tasks), use_decomposition, caps, seed,
                               n_candidates, workers=workers).metrics
            rows.append({'agents': int(n_agents), 'obstacles': int(n_obstacles), **metrics.to_dict()})
            logger.info(f"sweep cell ({n_agents} agents, {n_obstacles} obstacles): safety {metrics.safety_rate:.4f}")
    return pd.DataFrame(rows)


def classify_state(scores: np.ndarray) -> Region:
    if np.all(scores >= 0):
        return Region.ADMISSIBLE
    if np.all(scores < 0):
        return Region.INADMISSIBLE
    return Region.BOUNDARY


def visited_states(episode: EpisodeResult) -> List[List[Observation]]:
    """Per-agent sequences of visited observations (requires kept transitions)"""
    sequences = []
    for chain in episode.transitions:
        if chain:
            sequences.append([t.state for t in chain] + [chain[-1].next_state])
    return sequences


@dataclass
class InvarianceReport:
    """Region of every visited state and the summary fractions"""
    classes: List[List[RegionClass]]
    fractions: Dict[str, float]


def invariance_analysis(model: Scorer, trajectories: Sequence[Sequence[Observation]], n_probe: int,
                        rng: np.random.Generator,
                        action_box: Tuple[np.ndarray, np.ndarray]) -> InvarianceReport:
    """
    Classify visited states and flag forward-invariance violations

    A state is admissible-region when every probe scores >= 0,
    inadmissible-region when every probe scores < 0, and boundary otherwise.
    A boundary state whose successor on the trajectory is inadmissible-region
    is a violation.

    Args:
        model: Anything with .score
        trajectories: Visited observations in time order, one sequence per trajectory
        n_probe: Uniform probe actions per state
        rng: Probe source
        action_box: (low, high) bounds of the probes

    Returns:
        InvarianceReport; fractions are over all visited states, plus the
        violation share among boundary states
    """
    if n_probe < 1:
        raise ContractError(f"n_probe must be >= 1, got {n_probe}")
    low, high = (np.asarray(b, dtype=np.float64) for b in action_box)
    classes: List[List[RegionClass]] = []
    for trajectory in trajectories:
        row = []
        for observation in trajectory:
            scores = np.asarray(model.score(observation, rng.uniform(low, high, size=(n_probe, len(low)))))
            row.append(RegionClass(
                region=classify_state(scores),
                max_phi=float(scores.max()),
                admissible_fraction=float(np.mean(scores >= 0)),
            ))
        for t in range(len(row) - 1):
            row[t].violation = row[t].region is Region.BOUNDARY and row[t + 1].region is Region.INADMISSIBLE
        classes.append(row)

    flat = [c for row in classes for c in row]
    total = len(flat)
    count = {region: sum(c.region is region for c in flat) for region in Region}
    violations = sum(c.violation for c in flat)
    boundary = count[Region.BOUNDARY]
    fractions = {
        'admissible': count[Region.ADMISSIBLE] / total if total else 0.0,
        'boundary': boundary / total if total else 0.0,
        'inadmissible': count[Region.INADMISSIBLE] / total if total else 0.0,
        'violation': violations / total if total else 0.0,
        'boundary_violation': violations / boundary if boundary else 0.0,
        'states': float(total),
    }
    return InvarianceReport(classes, fractions)


@dataclass
class TimingReport:
    """Per-agent decision latency in milliseconds"""
    mean_ms: float
    p95_ms: float
    samples: int


def decision_timing(model: CamModel, tasks: Sequence[TaskSpec], use_decomposition: bool = True,
                    n_candidates: int = 2000, chunk_size: Optional[int] = None, seed: int = 0,
                    caps: Optional[SubgraphCaps] = None) -> TimingReport:
    """Wall-clock time per agent decision over greedy episodes"""
    result = evaluate(model, tasks, use_decomposition, caps, seed, n_candidates, chunk_size)
    samples = np.array([ms for episode in result.episodes for ms in episode.decision_ms])
    if len(samples) == 0:
        return TimingReport(0.0, 0.0, 0)
    return TimingReport(float(samples.mean()), float(np.percentile(samples, 95)), int(len(samples)))


def export_landscape(model: Scorer, observation: Observation, dims: Tuple[int, int], grid_resolution: int,
                     action_box: Tuple[np.ndarray, np.ndarray],
                     fixed_values: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    φ over a regular grid of two action dimensions, the others held fixed

    Args:
        model: Anything with .score
        observation: State to probe
        dims: The two action indices spanning the grid
        grid_resolution: Points per axis, corners included
        action_box: (low, high) of the action space
        fixed_values: Values of the other dimensions; defaults to the box center

    Returns:
        DataFrame with columns a_i, a_j, phi and grid_resolution² rows
    """
    low, high = (np.asarray(b, dtype=np.float64) for b in action_box)
    action_dim = len(low)
    if action_dim < 2:
        raise ContractError(f"a landscape needs two action dimensions, the box has {action_dim}")
    i, j = dims
    if i == j or not (0 <= i < action_dim and 0 <= j < action_dim):
        raise ContractError(f"landscape dims must be two distinct indices below {action_dim}, got {dims}")
    if grid_resolution < 2:
        raise ContractError(f"grid resolution must be >= 2, got {grid_resolution}")

    base = (low + high) / 2.0 if fixed_values is None else np.asarray(fixed_values, dtype=np.float64)
    if base.shape != (action_dim,):
        raise ContractError(f"fixed values need {action_dim} entries, got {base.shape}")
    xs = np.linspace(low[i], high[i], grid_resolution)
    ys = np.linspace(low[j], high[j], grid_resolution)
    grid_i, grid_j = np.meshgrid(xs, ys, indexing='ij')
    actions = np.tile(base, (grid_resolution ** 2, 1))
    actions[:, i] = grid_i.reshape(-1)
    actions[:, j] = grid_j.reshape(-1)
    phi = np.asarray(model.score(observation, actions))
    return pd.DataFrame({'a_i': actions[:, i], 'a_j': actions[:, j], 'phi': phi})


def write_metrics_table(rows: Union[pd.DataFrame, Sequence[Metrics]], path: Union[str, Path],
                        include_timing: bool = False) -> Path:
    """Metrics (or a sweep table) as CSV with a header row; timing columns are dropped unless asked for"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame([m.to_dict() for m in rows])
    if not include_timing:
        frame = frame.drop(columns=[c for c in TIMING_COLUMNS if c in frame.columns])
    frame.to_csv(path, index=False)
    logger.info(f"wrote {len(frame)} metrics row(s) to {path}")
    return path


def write_trajectories(records: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Trajectory records as JSON lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')
    return path


def write_landscape(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.10g')
    return path
