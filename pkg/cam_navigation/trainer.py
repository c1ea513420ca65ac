"""
Online CAM training: rollouts, safety labels, relabeling through the finished
episode, the three-term margin loss and the Adam loop with telemetry
"""
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .admissibility import (
    CamModel, Scorer, adaptive_agent_scoring, admissible_ratio,
    score_agents, score_pairs, select_action,
)
from .diffcore import AdamState, Tape, Tensor, adam_update, lr_plateau_step
from .exceptions import ConfigError, ContractError, NumericError, TrainingDiverged
from .models import (
    AgentTrace, EnvKind, Label, Observation, ScoredActions, SubgraphCaps,
    TaskMode, TaskSpec, Transition, WorldState,
)
from .worlds import (
    GRAVITY, check_collisions, goal_distances, observe_all, preferences,
    profile, sample_task, step_world, trajectory_records,
)

logger = logging.getLogger(__name__)

SUCCESS_WINDOW = 20


@dataclass
class TrainConfig:
    """Hyperparameters of one training run"""
    env: EnvKind = EnvKind.CAR
    gamma1: float = 0.0
    gamma2: float = 2e-2
    gamma3: float = 1e-2
    lam: float = 0.1
    n_candidates: int = 2000
    n_probe: Optional[int] = None
    batch_size: int = 256
    update_every: int = 10
    grad_steps: int = 100
    episodes: int = 1000
    horizon: Optional[int] = None
    noise_scale: float = 0.1
    epsilon: float = 0.0
    lr: float = 1e-3
    min_lr: float = 1e-5
    patience: int = 5
    buffer_capacity: int = 200_000
    validation_interval: int = 10
    validation_episodes: int = 10
    n_agents: int = 3
    n_obstacles: int = 0
    map_size: float = 3.0
    radius: float = 1.5
    thrust_offset: float = GRAVITY
    hidden: int = 64
    layers: int = 3
    seed: int = 0

    @classmethod
    def for_env(cls, env: EnvKind, **overrides: Any) -> 'TrainConfig':
        """Per-environment defaults (margins, update cadence, agent count) plus overrides"""
        prof = profile(env)
        g1, g2, g3 = prof.margins
        defaults = dict(env=env, gamma1=g1, gamma2=g2, gamma3=g3, update_every=prof.update_every)
        if not env.uses_graph:
            defaults['n_agents'] = 1
        defaults.update(overrides)
        return cls(**defaults)

    @property
    def margins(self) -> Tuple[float, float, float]:
        return self.gamma1, self.gamma2, self.gamma3

    @property
    def probe_count(self) -> int:
        return self.n_probe if self.n_probe is not None else self.n_candidates

    @property
    def resolved_horizon(self) -> int:
        return self.horizon if self.horizon is not None else profile(self.env).horizon

    def problems(self) -> List[str]:
        """Every field-level problem with this configuration"""
        found = []
        for name in ('gamma1', 'gamma2', 'gamma3', 'lam', 'noise_scale', 'epsilon'):
            if getattr(self, name) < 0:
                found.append(f"train.{name} must be >= 0, got {getattr(self, name)}")
        if self.epsilon > 1:
            found.append(f"train.epsilon must be <= 1, got {self.epsilon}")
        for name in ('n_candidates', 'batch_size', 'update_every', 'grad_steps', 'buffer_capacity',
                     'validation_interval', 'patience', 'hidden', 'layers'):
            if getattr(self, name) < 1:
                found.append(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_probe is not None and self.n_probe < 1:
            found.append(f"train.n_probe must be >= 1, got {self.n_probe}")
        for name in ('episodes', 'validation_episodes', 'n_agents', 'n_obstacles'):
            if getattr(self, name) < 0:
                found.append(f"train.{name} must be >= 0, got {getattr(self, name)}")
        if self.horizon is not None and self.horizon < 1:
            found.append(f"train.horizon must be >= 1, got {self.horizon}")
        if not 0 < self.min_lr <= self.lr:
            found.append(f"train.lr ({self.lr}) and train.min_lr ({self.min_lr}) need 0 < min_lr <= lr")
        if self.map_size < 1:
            found.append(f"train.map_size must be >= 1, got {self.map_size}")
        if self.radius <= 0:
            found.append(f"train.radius must be > 0, got {self.radius}")
        if not self.env.uses_graph and self.n_agents != 1:
            found.append(f"train.n_agents must be 1 for {self.env.value}, got {self.n_agents}")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            raise ConfigError(found)

    def to_dict(self) -> Dict[str, Any]:
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data['env'] = self.env.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        data = dict(data)
        env = EnvKind(data.pop('env', EnvKind.CAR.value))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"train.{k} is not a known field" for k in sorted(unknown)])
        return cls.for_env(env, **data)


class ReplayBuffer:
    """Bounded FIFO of transitions"""

    def __init__(self, capacity: int = 200_000):
        if capacity < 1:
            raise ContractError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: Deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, transition: Transition) -> None:
        self._items.append(transition)

    def extend(self, transitions: Iterable[Transition]) -> None:
        self._items.extend(transitions)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        """Uniform minibatch; drawn with replacement while the buffer holds fewer than batch_size"""
        if not self._items:
            raise ContractError("cannot sample from an empty replay buffer")
        replace_draw = len(self._items) < batch_size
        index = rng.choice(len(self._items), size=batch_size, replace=replace_draw)
        return [self._items[i] for i in index]


def label_transition(next_world: WorldState, agent_id: int) -> Label:
    """Inadmissible iff the agent is in collision at the successor state"""
    collided = check_collisions(next_world)[agent_id]
    return Label.INADMISSIBLE if collided else Label.ADMISSIBLE


def relabel_episode(model: Scorer, transitions: List[Transition], n_probe: int, rng: np.random.Generator,
                    action_box: Tuple[np.ndarray, np.ndarray]) -> Tuple[List[Transition], int]:
    """
    Propagate inadmissibility backwards through one agent's finished episode

    Walking from the second-to-last transition to the first, an admissible
    transition becomes inadmissible when its successor is inadmissible and no
    admissible action is found among n_probe fresh uniform actions at the
    successor state.

    Args:
        model: Current CAM (anything with .score)
        transitions: One agent's chain in step order; mutated in place
        n_probe: Number of probe actions per checked state
        rng: Probe source
        action_box: (low, high) bounds of the probes

    Returns:
        The transitions and the number of labels flipped
    """
    if n_probe < 1:
        raise ContractError(f"n_probe must be >= 1, got {n_probe}")
    low, high = (np.asarray(b, dtype=np.float64) for b in action_box)
    count = 0
    for t in range(len(transitions) - 2, -1, -1):
        successor = transitions[t + 1]
        if successor.admissible:
            continue
        probes = rng.uniform(low, high, size=(n_probe, len(low)))
        if np.max(model.score(successor.state, probes)) < 0:
            if transitions[t].admissible:
                transitions[t].label = Label.INADMISSIBLE
                transitions[t].relabeled = True
                count += 1
    return transitions, count


@dataclass
class LossTerms:
    """The three loss terms; each is 0 when its partition is empty"""
    admissible: Tensor
    inadmissible: Tensor
    invariance: Tensor

    @property
    def total(self) -> Tensor:
        return dc.add(dc.add(self.admissible, self.inadmissible), self.invariance)


def _actions(transitions: Sequence[Transition], next_action: bool = False) -> np.ndarray:
    return np.stack([np.asarray(t.next_action if next_action else t.action, dtype=np.float64)
                     for t in transitions])


def cam_loss_terms(model: CamModel, batch: Sequence[Transition], margins: Tuple[float, float, float],
                   lam: float) -> LossTerms:
    """
    The hinge terms on admissible pairs, inadmissible pairs and consecutive admissible pairs

    Args:
        model: CAM being trained
        batch: Labeled transitions
        margins: (γ1, γ2, γ3)
        lam: Decay weight λ of the forward-invariance term

    Returns:
        LossTerms with the three mean hinge penalties
    """
    g1, g2, g3 = margins
    admissible = [t for t in batch if t.admissible]
    inadmissible = [t for t in batch if not t.admissible]
    eligible = [t for t in admissible if t.has_successor]

    term1 = term2 = term3 = Tensor(0.0)
    if admissible:
        phi = score_pairs(model, [t.state for t in admissible], _actions(admissible))
        term1 = dc.mean(dc.relu(dc.sub(g1, phi)))
    if inadmissible:
        phi = score_pairs(model, [t.state for t in inadmissible], _actions(inadmissible))
        term2 = dc.mean(dc.relu(dc.add(g2, phi)))
    if eligible:
        phi = score_pairs(model, [t.state for t in eligible], _actions(eligible))
        phi_next = score_pairs(model, [t.next_state for t in eligible], _actions(eligible, next_action=True))
        slack = dc.sub(dc.sub(g3, dc.sub(phi_next, phi)), dc.mul(lam, phi))
        term3 = dc.mean(dc.relu(slack))
    return LossTerms(term1, term2, term3)


def cam_loss(model: CamModel, batch: Sequence[Transition], margins: Tuple[float, float, float],
             lam: float) -> Tensor:
    """Scalar training loss; records on the active tape"""
    return cam_loss_terms(model, batch, margins, lam).total


def random_transitions(kind: EnvKind, count: int, rng: np.random.Generator, n_agents: int = 3,
                       n_obstacles: int = 2, map_size: float = 2.0,
                       admissible_share: float = 0.5, successor_share: float = 0.7) -> List[Transition]:
    """
    Synthetic labeled transitions from random tasks and random actions

    Labels are drawn at random; the first transition is admissible with a
    successor and the second inadmissible, so every loss term is populated
    once count >= 2. Used for gradient checks and loss tests.
    """
    prof = profile(kind)
    graph = kind.uses_graph
    transitions: List[Transition] = []
    while len(transitions) < count:
        spec = TaskSpec(kind, n_agents if graph else 1, n_obstacles if graph else 0,
                        map_size if graph else 6.0, seed=int(rng.integers(0, 2 ** 31)))
        world = sample_task(spec)
        actions = prof.sample_actions(world.n_agents, rng)
        successor = step_world(world, actions).world
        next_actions = prof.sample_actions(world.n_agents, rng)
        observations, next_observations = observe_all(world), observe_all(successor)
        for i in range(world.n_agents):
            k = len(transitions)
            admissible = k == 0 or (k != 1 and rng.random() < admissible_share)
            label = Label.ADMISSIBLE if admissible else Label.INADMISSIBLE
            transitions.append(Transition(
                state=observations[i],
                action=actions[i],
                label=label,
                next_state=next_observations[i],
                next_action=next_actions[i] if k == 0 or rng.random() < successor_share else None,
                agent_id=i,
            ))
    return transitions[:count]


@dataclass
class EpisodeResult:
    """Transitions and outcome statistics of one rollout"""
    transitions: List[List[Transition]]
    traces: List[AgentTrace]
    steps: int
    admissible_ratios: List[float] = field(default_factory=list)
    decision_ms: List[float] = field(default_factory=list)
    records: List[Dict[str, Any]] = field(default_factory=list)
    relabeled: int = 0

    @property
    def n_agents(self) -> int:
        return len(self.traces)

    @property
    def collisions(self) -> int:
        return int(sum(trace.collisions.sum() for trace in self.traces))

    @property
    def success(self) -> float:
        """Fraction of agents that reached their goal without any collision"""
        if not self.traces:
            return 0.0
        ok = [trace.reached.any() and not trace.collisions.any() for trace in self.traces]
        return float(np.mean(ok))

    @property
    def mean_admissible_ratio(self) -> float:
        return float(np.mean(self.admissible_ratios)) if self.admissible_ratios else 0.0

    def all_transitions(self) -> List[Transition]:
        return [t for chain in self.transitions for t in chain]


@dataclass
class RolloutOptions:
    """Knobs that differ between training rollouts and greedy evaluation"""
    n_candidates: int = 2000
    horizon: int = 128
    noise_scale: float = 0.1
    epsilon: float = 0.0
    radius: float = 1.5
    thrust_offset: float = GRAVITY
    caps: Optional[SubgraphCaps] = None
    chunk_size: Optional[int] = None
    record: bool = False
    keep_transitions: bool = True

    @classmethod
    def from_train(cls, config: TrainConfig, greedy: bool = False) -> 'RolloutOptions':
        return cls(
            n_candidates=config.n_candidates,
            horizon=config.resolved_horizon,
            noise_scale=0.0 if greedy else config.noise_scale,
            epsilon=0.0 if greedy else config.epsilon,
            radius=config.radius,
            thrust_offset=config.thrust_offset,
        )


def _score_tick(model: CamModel, world: WorldState, observations: List[Observation], active: List[int],
                options: RolloutOptions, rng: np.random.Generator) -> List[ScoredActions]:
    prof = profile(world.kind)
    candidates = np.stack([prof.sample_actions(options.n_candidates, rng) for _ in active])
    omega = np.stack([
        preferences(world, agent, candidates[i], options.thrust_offset) for i, agent in enumerate(active)
    ])
    chosen = [observations[a] for a in active]
    if options.chunk_size is not None:
        return adaptive_agent_scoring(model, chosen, candidates, omega, options.chunk_size, options.caps, rng)
    phis = score_agents(model, chosen, candidates, options.caps, rng)
    return [ScoredActions(candidates[i], phis[i], omega[i]) for i in range(len(active))]


def rollout_episode(model: CamModel, world: WorldState, options: Union[TrainConfig, RolloutOptions],
                    rng: np.random.Generator, episode_id: int = 0) -> EpisodeResult:
    """
    Run one episode from an initial world

    Every tick each active agent samples candidates, scores them, selects an
    action, then all agents step together and the transitions are labeled by
    the successor's collision flags. Navigation episodes end at the horizon or
    once every agent has reached its goal; reached agents hold still and stop
    producing transitions.

    Args:
        model: CAM used for scoring
        world: Initial world
        options: Rollout knobs, or a TrainConfig for noisy training rollouts
        rng: Source of candidates and noise
        episode_id: Stored on every transition

    Returns:
        EpisodeResult with per-agent transition chains and traces
    """
    if isinstance(options, TrainConfig):
        options = RolloutOptions.from_train(options)
    n = world.n_agents
    prof = profile(world.kind)
    chains: List[List[Transition]] = [[] for _ in range(n)]
    collisions: List[List[bool]] = [[] for _ in range(n)]
    reached: List[List[bool]] = [[] for _ in range(n)]
    distances: List[List[float]] = [[d] for d in goal_distances(world)] if n else []
    result = EpisodeResult(chains, [], 0)
    if n == 0:
        return result

    noise = options.noise_scale * prof.half_width
    box = (prof.low, prof.high)
    navigation = world.mode is TaskMode.NAVIGATION

    observations = observe_all(world, options.radius)
    while world.t < options.horizon:
        active = [i for i in range(n) if not (navigation and world.reached[i])]
        started = time.perf_counter()
        scored = _score_tick(model, world, observations, active, options, rng)
        actions = np.zeros((n, prof.action_dim))
        for slot, agent in enumerate(active):
            actions[agent] = select_action(scored[slot], noise, rng, box, options.epsilon)
        if active:
            result.decision_ms.append((time.perf_counter() - started) * 1000.0 / len(active))
        result.admissible_ratios.extend(admissible_ratio(s) for s in scored)

        step = step_world(world, actions, options.thrust_offset)
        if options.record:
            result.records.extend(
                dict(record, episode=episode_id) for record in trajectory_records(world, step)
            )
        next_observations = observe_all(step.world, options.radius)

        for agent in range(n):
            collisions[agent].append(bool(step.collisions[agent]))
            reached[agent].append(bool(step.world.reached[agent]))
            distances[agent].append(float(goal_distances(step.world)[agent]))
        if options.keep_transitions:
            for agent in active:
                if chains[agent]:
                    chains[agent][-1].next_action = actions[agent].copy()
                chains[agent].append(Transition(
                    state=observations[agent],
                    action=actions[agent].copy(),
                    label=Label.INADMISSIBLE if step.collisions[agent] else Label.ADMISSIBLE,
                    next_state=next_observations[agent],
                    episode_id=episode_id,
                    step=world.t,
                    agent_id=agent,
                ))
        world = step.world
        observations = next_observations
        if navigation and world.reached.all():
            break

    result.steps = world.t
    result.traces = [
        AgentTrace(i, np.array(collisions[i]), np.array(reached[i]), np.array(distances[i]))
        for i in range(n)
    ]
    return result


@dataclass
class TrainResult:
    """Trained model plus the optimizer state and telemetry rows"""
    model: CamModel
    optimizer: AdamState
    telemetry: List[Dict[str, Any]]
    updates: int = 0


class TelemetryWriter:
    """Appends telemetry rows as JSON lines"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text('')

    def write(self, row: Dict[str, Any]) -> None:
        if self.path is None:
            return
        with open(self.path, 'a') as f:
            f.write(json.dumps(row, sort_keys=True) + '\n')


def _task(config: TrainConfig, seed: int) -> TaskSpec:
    return TaskSpec(
        kind=config.env,
        n_agents=config.n_agents,
        n_obstacles=config.n_obstacles,
        map_size=config.map_size,
        seed=seed,
        horizon=config.resolved_horizon,
    )


def validate_model(model: CamModel, config: TrainConfig, seeds: Sequence[int]) -> float:
    """Mean greedy success over held-out tasks"""
    options = RolloutOptions.from_train(config, greedy=True)
    options.keep_transitions = False
    outcomes = []
    for seed in seeds:
        world = sample_task(_task(config, int(seed)))
        outcomes.append(rollout_episode(model, world, options, np.random.default_rng(int(seed))).success)
    return float(np.mean(outcomes)) if outcomes else 0.0


def gradient_step(model: CamModel, batch: Sequence[Transition], config: TrainConfig,
                  optimizer: AdamState) -> float:
    """
    One Adam step on the CAM loss; returns the loss before the step

    Raises:
        TrainingDiverged: The loss, a gradient or an updated parameter is non-finite
    """
    model.zero_grad()
    with Tape() as tape:
        loss = cam_loss(model, batch, config.margins, config.lam)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value}")
        tape.backward(loss)
    try:
        adam_update(model.parameters(), None, optimizer)
    except NumericError as e:
        raise TrainingDiverged(str(e)) from e
    return value


def train(config: TrainConfig, model: Optional[CamModel] = None,
          telemetry_path: Optional[Union[str, Path]] = None,
          checkpoint_dir: Optional[Union[str, Path]] = None,
          config_hash: Optional[str] = None) -> TrainResult:
    """
    Train a CAM online

    Each episode is rolled out with exploration, relabeled with the current
    model and appended to the buffer. Every `update_every` episodes the model
    takes `grad_steps` Adam steps; every `validation_interval` updates a
    greedy validation round drives the plateau schedule and a checkpoint is
    written.

    Args:
        config: Training hyperparameters
        model: Model to continue training; a fresh one is built otherwise
        telemetry_path: JSON-lines file for telemetry rows
        checkpoint_dir: Directory for periodic, final and divergence checkpoints
        config_hash: Stored in every checkpoint

    Returns:
        TrainResult

    Raises:
        TrainingDiverged: The loss became non-finite (a checkpoint is written first)
    """
    from .checkpoint import save_model

    config.validate()
    init_seq, task_seq, rollout_seq, batch_seq, validation_seq = np.random.SeedSequence(config.seed).spawn(5)
    if model is None:
        model = CamModel.initialize(config.env, hidden=config.hidden, layers=config.layers,
                                    rng=np.random.default_rng(init_seq))
    optimizer = AdamState(lr=config.lr, min_lr=config.min_lr, patience=config.patience)
    result = TrainResult(model, optimizer, [])
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def checkpoint(name: str) -> Optional[str]:
        if checkpoint_dir is None:
            return None
        return str(save_model(model, checkpoint_dir / name, config_hash=config_hash))

    if config.episodes == 0:
        logger.info("no episodes requested; keeping the initialized model")
        checkpoint("final.npz")
        return result

    prof = profile(config.env)
    box = (prof.low, prof.high)
    task_rng = np.random.default_rng(task_seq)
    rollout_rng = np.random.default_rng(rollout_seq)
    batch_rng = np.random.default_rng(batch_seq)
    validation_seeds = np.random.default_rng(validation_seq).integers(0, 2 ** 31, config.validation_episodes)

    buffer = ReplayBuffer(config.buffer_capacity)
    window: Deque[float] = deque(maxlen=SUCCESS_WINDOW)
    writer = TelemetryWriter(telemetry_path)
    last_loss = float('nan')

    for episode in range(config.episodes):
        world = sample_task(_task(config, int(task_rng.integers(0, 2 ** 31))))
        outcome = rollout_episode(model, world, config, rollout_rng, episode_id=episode)
        for chain in outcome.transitions:
            _, flipped = relabel_episode(model, chain, config.probe_count, rollout_rng, box)
            outcome.relabeled += flipped
        buffer.extend(outcome.all_transitions())
        window.append(outcome.success)

        if (episode + 1) % config.update_every == 0 and len(buffer):
            try:
                for _ in range(config.grad_steps):
                    last_loss = gradient_step(model, buffer.sample(config.batch_size, batch_rng), config, optimizer)
            except TrainingDiverged as e:
                path = checkpoint('diverged.npz')
                logger.error(f"training diverged at episode {episode}: {e}")
                raise TrainingDiverged(str(e), checkpoint_path=path)
            result.updates += 1
            if result.updates % config.validation_interval == 0:
                score = validate_model(model, config, validation_seeds)
                lr_plateau_step(optimizer, score)
                checkpoint(f"update_{result.updates:05d}.npz")
                writer.write({'kind': 'validation', 'update': result.updates, 'success': score, 'lr': optimizer.lr})
                logger.info(f"update {result.updates}: validation success {score:.3f}, lr {optimizer.lr:.2e}")

        row = {
            'kind': 'episode',
            'episode': episode,
            'success': outcome.success,
            'success_window': float(np.mean(window)),
            'relabeled': outcome.relabeled,
            'admissible_ratio': outcome.mean_admissible_ratio,
            'collisions': outcome.collisions,
            'steps': outcome.steps,
            'loss': None if np.isnan(last_loss) else last_loss,
            'lr': optimizer.lr,
        }
        result.telemetry.append(row)
        writer.write(row)
        if (episode + 1) % 10 == 0:
            logger.info(
                f"episode {episode + 1}/{config.episodes}: success window {row['success_window']:.2f}, "
                f"relabeled {outcome.relabeled}, admissible ratio {row['admissible_ratio']:.3f}"
            )

    checkpoint('final.npz')
    return result
