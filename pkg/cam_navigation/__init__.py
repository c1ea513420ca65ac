"""
Control Admissibility Models for multi-agent navigation

This package trains scoring functions over state-action pairs from sparse
collision labels, composes them over decomposed ego graphs and uses them to
drive any number of agents through navigation and chasing tasks.
"""

from .models import (
    EnvKind,
    Backbone,
    TaskMode,
    Label,
    Region,
    WorldState,
    TaskSpec,
    SubgraphCaps,
    EgoGraph,
    Transition,
    ScoredActions,
    AgentTrace,
    Metrics,
    RegionClass
)

from .exceptions import (
    CamError,
    ShapeError,
    ContractError,
    NumericError,
    DensityError,
    ConfigError,
    CheckpointError,
    TrainingDiverged
)

from .worlds import (
    profile,
    sample_task,
    step_world,
    observe,
    observe_all,
    check_collisions,
    preferences
)

from .graphs import (
    build_ego_graph,
    decompose
)

from .admissibility import (
    CamModel,
    score_agents,
    score_with_decomposition,
    compose_min,
    select_action,
    adaptive_agent_scoring
)

from .trainer import (
    TrainConfig,
    ReplayBuffer,
    relabel_episode,
    cam_loss,
    rollout_episode,
    train
)

from .evaluator import (
    evaluate,
    density_sweep,
    run_chasing,
    invariance_analysis,
    export_landscape
)

from .checkpoint import save_model, load_model
from .config import RunConfig

__version__ = "1.0.0"

__all__ = [
    # Models
    'EnvKind',
    'Backbone',
    'TaskMode',
    'Label',
    'Region',
    'WorldState',
    'TaskSpec',
    'SubgraphCaps',
    'EgoGraph',
    'Transition',
    'ScoredActions',
    'AgentTrace',
    'Metrics',
    'RegionClass',

    # Errors
    'CamError',
    'ShapeError',
    'ContractError',
    'NumericError',
    'DensityError',
    'ConfigError',
    'CheckpointError',
    'TrainingDiverged',

    # Environments
    'profile',
    'sample_task',
    'step_world',
    'observe',
    'observe_all',
    'check_collisions',
    'preferences',
    'build_ego_graph',
    'decompose',

    # Admissibility model
    'CamModel',
    'score_agents',
    'score_with_decomposition',
    'compose_min',
    'select_action',
    'adaptive_agent_scoring',

    # Training and evaluation
    'TrainConfig',
    'ReplayBuffer',
    'relabel_episode',
    'cam_loss',
    'rollout_episode',
    'train',
    'evaluate',
    'density_sweep',
    'run_chasing',
    'invariance_analysis',
    'export_landscape',

    # Persistence and configuration
    'save_model',
    'load_model',
    'RunConfig'
]
