"""
Data models for worlds, graphs, transitions and evaluation results
"""
from dataclasses import dataclass, field
from typing import Optional, Dict, Any, Tuple, Union
from enum import Enum

import numpy as np

from .exceptions import ContractError


AGENT_RADIUS = 0.15
OBSTACLE_RADIUS = 0.15


class EnvKind(Enum):
    """Enumeration of the supported environments"""
    CAR = "car"
    DYNAMIC_DUBINS = "dyn_dubins"
    DRONE = "drone"
    INTEGRATOR = "integrator"
    DUBINS_SINGLE = "dubins_single"

    @property
    def position_dims(self) -> int:
        """Number of leading state components that form the position"""
        return 3 if self is EnvKind.DRONE else 2

    @property
    def uses_graph(self) -> bool:
        """Multi-agent environments observe egocentric graphs, the others raw vectors"""
        return self in (EnvKind.CAR, EnvKind.DYNAMIC_DUBINS, EnvKind.DRONE)


class Backbone(Enum):
    """Network family behind a CAM"""
    MLP = "mlp"
    GNN = "gnn"


class TaskMode(Enum):
    """What the agents' goals mean"""
    NAVIGATION = "navigation"
    CHASING = "chasing"


class Label(Enum):
    """Binary safety label of a state-action pair"""
    ADMISSIBLE = "admissible"
    INADMISSIBLE = "inadmissible"


class Region(Enum):
    """Classification of a state from its sampled action scores"""
    ADMISSIBLE = "admissible-region"
    BOUNDARY = "boundary"
    INADMISSIBLE = "inadmissible-region"


def _frozen_array(values: Any, dtype: Any = np.float64, ndim: Optional[int] = None) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    if ndim is not None and array.ndim != ndim:
        if array.size == 0:
            array = array.reshape((0,) * (ndim - 1) + (0,)) if ndim > 1 else array.reshape(0)
        else:
            raise ContractError(f"expected a {ndim}-d array, got shape {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class WorldState:
    """Immutable snapshot of a multi-agent (or single-agent) world"""
    kind: EnvKind
    states: np.ndarray
    goals: np.ndarray
    obstacles: np.ndarray
    map_size: float
    t: int = 0
    reached: Optional[np.ndarray] = None
    mode: TaskMode = TaskMode.NAVIGATION
    targets: Optional[np.ndarray] = None
    danger_regions: Tuple[Tuple[float, float, float, float], ...] = ()
    obstacle_radius: float = OBSTACLE_RADIUS

    def __post_init__(self):
        states = _frozen_array(self.states, ndim=2)
        goals = _frozen_array(self.goals, ndim=2)
        obstacles = np.array(self.obstacles, dtype=np.float64).reshape(-1, 2)
        obstacles.setflags(write=False)
        reached = self.reached
        if reached is None:
            reached = np.zeros(len(states), dtype=bool)
        reached = _frozen_array(reached, dtype=bool, ndim=1)
        if len(goals) != len(states) or len(reached) != len(states):
            raise ContractError(
                f"{len(states)} agents but {len(goals)} goals and {len(reached)} reached flags"
            )
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'goals', goals)
        object.__setattr__(self, 'obstacles', obstacles)
        object.__setattr__(self, 'reached', reached)
        if self.targets is not None:
            object.__setattr__(self, 'targets', _frozen_array(self.targets, dtype=np.int64, ndim=1))
        object.__setattr__(
            self, 'danger_regions', tuple(tuple(float(v) for v in r) for r in self.danger_regions)
        )

    @property
    def n_agents(self) -> int:
        return int(self.states.shape[0])

    @property
    def positions(self) -> np.ndarray:
        """Agent positions, 3D for drones and 2D otherwise"""
        return self.states[:, :self.kind.position_dims]

    def to_dict(self) -> Dict[str, Any]:
        """Convert to a JSON-friendly dictionary"""
        return {
            'kind': self.kind.value,
            'states': self.states.tolist(),
            'goals': self.goals.tolist(),
            'obstacles': self.obstacles.tolist(),
            'map_size': self.map_size,
            't': self.t,
            'reached': self.reached.tolist(),
            'mode': self.mode.value,
            'targets': None if self.targets is None else self.targets.tolist(),
            'danger_regions': [list(r) for r in self.danger_regions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'WorldState':
        """Create instance from a dictionary written by to_dict"""
        targets = data.get('targets')
        return cls(
            kind=EnvKind(data['kind']),
            states=data['states'],
            goals=data['goals'],
            obstacles=data.get('obstacles', []),
            map_size=float(data.get('map_size', 3.0)),
            t=int(data.get('t', 0)),
            reached=data.get('reached'),
            mode=TaskMode(data.get('mode', TaskMode.NAVIGATION.value)),
            targets=None if targets is None else np.asarray(targets),
            danger_regions=tuple(tuple(r) for r in data.get('danger_regions', [])),
        )


@dataclass
class TaskSpec:
    """Parameters of the task generator"""
    kind: EnvKind
    n_agents: int = 3
    n_obstacles: int = 0
    map_size: float = 3.0
    seed: int = 0
    mode: TaskMode = TaskMode.NAVIGATION
    horizon: Optional[int] = None

    def validate(self) -> None:
        """Raise ContractError when the fields cannot describe a task"""
        if self.n_agents < 0 or self.n_obstacles < 0:
            raise ContractError("agent and obstacle counts must be >= 0")
        if self.map_size <= 0:
            raise ContractError(f"map size must be > 0, got {self.map_size}")
        if self.mode is TaskMode.CHASING and self.n_agents == 1:
            raise ContractError("a chasing task needs at least two agents")
        if self.horizon is not None and self.horizon < 1:
            raise ContractError(f"horizon must be >= 1, got {self.horizon}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'n_agents': self.n_agents,
            'n_obstacles': self.n_obstacles,
            'map_size': self.map_size,
            'seed': self.seed,
            'mode': self.mode.value,
            'horizon': self.horizon,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TaskSpec':
        return cls(
            kind=EnvKind(data['kind']),
            n_agents=int(data.get('n_agents', 3)),
            n_obstacles=int(data.get('n_obstacles', 0)),
            map_size=float(data.get('map_size', 3.0)),
            seed=int(data.get('seed', 0)),
            mode=TaskMode(data.get('mode', TaskMode.NAVIGATION.value)),
            horizon=data.get('horizon'),
        )


@dataclass(frozen=True)
class SubgraphCaps:
    """Per-type edge limits of the training distribution"""
    max_agent_edges: int = 2
    max_obstacle_edges: int = 9

    def __post_init__(self):
        if self.max_agent_edges < 0 or self.max_obstacle_edges < 0:
            raise ContractError("subgraph caps must be >= 0")


EDGE_AGENT = 0
EDGE_OBSTACLE = 1


@dataclass(frozen=True)
class EgoGraph:
    """One agent's star graph: every edge points at the ego node"""
    node_features: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_features: np.ndarray
    edge_kinds: np.ndarray
    kind: EnvKind
    ego_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'node_features', _frozen_array(self.node_features, ndim=2))
        object.__setattr__(self, 'edge_src', _frozen_array(self.edge_src, dtype=np.int64, ndim=1))
        object.__setattr__(self, 'edge_dst', _frozen_array(self.edge_dst, dtype=np.int64, ndim=1))
        object.__setattr__(self, 'edge_kinds', _frozen_array(self.edge_kinds, dtype=np.int64, ndim=1))
        features = np.array(self.edge_features, dtype=np.float64)
        if features.size == 0:
            features = features.reshape(0, features.shape[-1] if features.ndim == 2 else 0)
        features.setflags(write=False)
        object.__setattr__(self, 'edge_features', features)
        if np.any(self.edge_dst != self.ego_index):
            raise ContractError("every edge of an ego graph must point at the ego node")
        if self.node_features[self.ego_index, 0] != 1.0:
            raise ContractError("the ego node must be typed as an agent")

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @property
    def n_agent_edges(self) -> int:
        return int(np.count_nonzero(self.edge_kinds == EDGE_AGENT))

    @property
    def n_obstacle_edges(self) -> int:
        return int(np.count_nonzero(self.edge_kinds == EDGE_OBSTACLE))


Observation = Union[EgoGraph, np.ndarray]


@dataclass
class Transition:
    """A labeled state-action pair and the next pair on the same agent's trajectory"""
    state: Observation
    action: np.ndarray
    label: Label
    next_state: Observation
    next_action: Optional[np.ndarray] = None
    relabeled: bool = False
    episode_id: int = 0
    step: int = 0
    agent_id: int = 0

    @property
    def admissible(self) -> bool:
        return self.label is Label.ADMISSIBLE

    @property
    def has_successor(self) -> bool:
        return self.next_action is not None


@dataclass
class ScoredActions:
    """Candidate actions with their admissibility and preference scores"""
    actions: np.ndarray
    phi: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim == 1:
            self.actions = self.actions[:, None]
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1)
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(-1)
        if not (len(self.actions) == len(self.phi) == len(self.omega)):
            raise ContractError(
                f"{len(self.actions)} actions, {len(self.phi)} scores and {len(self.omega)} preferences"
            )

    def __len__(self) -> int:
        return len(self.phi)


@dataclass
class AgentTrace:
    """Per-timestep outcome flags of one agent over one episode"""
    agent_id: int
    collisions: np.ndarray
    reached: np.ndarray
    distances: Optional[np.ndarray] = None

    def __post_init__(self):
        self.collisions = np.asarray(self.collisions, dtype=bool)
        self.reached = np.asarray(self.reached, dtype=bool)
        if self.distances is not None:
            self.distances = np.asarray(self.distances, dtype=np.float64)

    @property
    def steps(self) -> int:
        return int(len(self.collisions))


@dataclass
class Metrics:
    """Aggregate evaluation results"""
    safety_rate: float
    mean_reward: float
    success_rate: float
    mean_decision_ms: float = 0.0
    max_decision_ms: float = 0.0
    task_count: int = 0
    seeds: Tuple[int, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'safety_rate': self.safety_rate,
            'mean_reward': self.mean_reward,
            'success_rate': self.success_rate,
            'mean_decision_ms': self.mean_decision_ms,
            'max_decision_ms': self.max_decision_ms,
            'task_count': self.task_count,
            'seeds': ' '.join(str(s) for s in self.seeds),
        }


@dataclass
class RegionClass:
    """Region of one visited state and whether it broke forward invariance"""
    region: Region
    violation: bool = False
    max_phi: float = 0.0
    admissible_fraction: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'region': self.region.value,
            'violation': self.violation,
            'max_phi': self.max_phi,
            'admissible_fraction': self.admissible_fraction,
        }

