"""
Run configuration: JSON files, dotted-key overrides, validation and hashing
"""
import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from dotenv import load_dotenv

from .exceptions import ConfigError
from .models import Backbone, EnvKind, SubgraphCaps, TaskMode, TaskSpec
from .trainer import TrainConfig
from .worlds import profile

logger = logging.getLogger(__name__)

OUTPUT_ROOT_VAR = 'CAM_OUTPUT_ROOT'
DEFAULT_OUTPUT_ROOT = 'runs'

DEFAULTS: Dict[str, Any] = {
    'seed': 0,
    'model': {
        'backbone': None,
        'hidden': 64,
        'layers': 3,
    },
    'train': {},
    'task': {
        'n_agents': 3,
        'n_obstacles': 0,
        'map_size': 3.0,
        'seed': 0,
        'mode': 'navigation',
        'horizon': None,
    },
    'eval': {
        'decomposition': True,
        'max_agent_edges': 2,
        'max_obstacle_edges': 9,
        'n_tasks': 20,
        'n_candidates': 2000,
        'chunk_size': None,
        'seed': 1000,
        'workers': 1,
        'n_probe': 256,
        'sweep_agents': [],
        'sweep_obstacles': [],
        'thrust_offset': 9.8,
        'record_trajectories': False,
    },
    'landscape': {
        'dims': [0, 1],
        'resolution': 41,
        'agent': 0,
        'fixed_values': None,
    },
    'output': {
        'root': None,
        'run_name': None,
    },
}

SECTIONS = ('model', 'task', 'eval', 'landscape', 'output')


def env_defaults(env: Any) -> Dict[str, Any]:
    """Defaults that depend on the environment; empty for an unknown tag"""
    try:
        kind = EnvKind(env)
    except ValueError:
        return {}
    if kind.uses_graph:
        return {}
    return {'task': {'n_agents': 1, 'n_obstacles': 0}}


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge `update` into a copy of `base`"""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text: str) -> Tuple[List[str], Any]:
    """
    Parse a dotted-key override such as ``train.episodes=10``

    The value is read as JSON when possible, otherwise kept as a string.
    """
    if '=' not in text:
        raise ConfigError([f"override {text!r} is not of the form key.path=value"])
    key, raw = text.split('=', 1)
    path = [part for part in key.strip().split('.') if part]
    if not path:
        raise ConfigError([f"override {text!r} has an empty key"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = copy.deepcopy(data)
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[path[-1]] = value
    return data


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except OSError as e:
        logger.error(f"Error reading config {path}: {e}")
        raise ConfigError([f"config file {path} could not be read: {e.strerror}"]) from e
    except json.JSONDecodeError as e:
        raise ConfigError([f"config file {path} is not valid JSON: {e}"]) from e
    if not isinstance(data, dict):
        raise ConfigError([f"config file {path} must hold a JSON object"])
    return data


def canonical_hash(data: Any) -> str:
    """SHA-256 of the sorted-key JSON encoding"""
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass
class RunConfig:
    """Fully resolved configuration of one command plus its provenance"""
    data: Dict[str, Any]
    source: Optional[str] = None
    overrides: List[str] = field(default_factory=list)

    @classmethod
    def resolve(cls, path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                base: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        Merge defaults, an optional config file and overrides, then validate

        Args:
            path: JSON config file
            overrides: Dotted-key overrides applied last
            base: Extra defaults layered between the built-ins and the file
                (a checkpoint's architecture, for instance)

        Returns:
            A validated RunConfig

        Raises:
            ConfigError: Listing every invalid field
        """
        layers = [base or {}]
        if path is not None:
            layers.append(load_config_file(path))
        provisional = DEFAULTS
        for layer in layers:
            provisional = deep_merge(provisional, layer)
        provisional = apply_overrides(provisional, overrides)

        data = deep_merge(DEFAULTS, env_defaults(provisional.get('env')))
        for layer in layers:
            data = deep_merge(data, layer)
        data = apply_overrides(data, overrides)
        config = cls(data, str(path) if path is not None else None, list(overrides))
        config.validate()
        return config

    @property
    def env(self) -> EnvKind:
        return EnvKind(self.data['env'])

    @property
    def seed(self) -> int:
        return int(self.data['seed'])

    @property
    def hash(self) -> str:
        return canonical_hash(self.data)

    def problems(self) -> List[str]:
        found = []
        data = self.data
        unknown = set(data) - set(DEFAULTS) - {'env'}
        found.extend(f"{key} is not a known setting" for key in sorted(unknown))
        for section in SECTIONS:
            if not isinstance(data.get(section), dict):
                found.append(f"{section} must be an object")
                continue
            extra = set(data[section]) - set(DEFAULTS[section])
            found.extend(f"{section}.{key} is not a known setting" for key in sorted(extra))
        if any(not isinstance(data.get(section), dict) for section in SECTIONS):
            return found

        if 'env' not in data:
            found.append("env is required (one of: " + ', '.join(k.value for k in EnvKind) + ")")
            return found
        try:
            env = EnvKind(data['env'])
        except ValueError:
            found.append(f"env {data['env']!r} is not one of: " + ', '.join(k.value for k in EnvKind))
            return found

        backbone = data['model'].get('backbone')
        if backbone is not None:
            try:
                chosen = Backbone(backbone)
                if chosen is not profile(env).backbone:
                    found.append(f"model.backbone {backbone!r} cannot observe {env.value}")
            except ValueError:
                found.append(f"model.backbone {backbone!r} is not one of: mlp, gnn")
        if not isinstance(data.get('train'), dict):
            found.append("train must be an object")
        else:
            try:
                found.extend(self.train_config().problems())
            except ConfigError as e:
                found.extend(e.problems)
            except (TypeError, ValueError) as e:
                found.append(f"train section is invalid: {e}")

        task = data['task']
        try:
            TaskMode(task.get('mode'))
        except ValueError:
            found.append(f"task.mode {task.get('mode')!r} is not navigation or chasing")
        for name in ('n_agents', 'n_obstacles'):
            if not isinstance(task.get(name), int) or task[name] < 0:
                found.append(f"task.{name} must be an integer >= 0, got {task.get(name)!r}")
        if not isinstance(task.get('map_size'), (int, float)) or task['map_size'] < 1:
            found.append(f"task.map_size must be a number >= 1, got {task.get('map_size')!r}")
        if not env.uses_graph and task.get('n_agents') != 1:
            found.append(f"task.n_agents must be 1 for {env.value}, got {task.get('n_agents')!r}")

        ev = data['eval']
        for name in ('n_tasks', 'n_candidates', 'workers', 'n_probe'):
            if not isinstance(ev.get(name), int) or ev[name] < 1:
                found.append(f"eval.{name} must be an integer >= 1, got {ev.get(name)!r}")
        for name in ('max_agent_edges', 'max_obstacle_edges'):
            if not isinstance(ev.get(name), int) or ev[name] < 0:
                found.append(f"eval.{name} must be an integer >= 0, got {ev.get(name)!r}")
        if ev.get('chunk_size') is not None and (not isinstance(ev['chunk_size'], int) or ev['chunk_size'] < 1):
            found.append(f"eval.chunk_size must be null or an integer >= 1, got {ev['chunk_size']!r}")

        land = data['landscape']
        if not isinstance(land.get('resolution'), int) or land['resolution'] < 2:
            found.append(f"landscape.resolution must be an integer >= 2, got {land.get('resolution')!r}")
        dims = land.get('dims')
        if not (isinstance(dims, list) and len(dims) == 2):
            found.append(f"landscape.dims must be a list of two action indices, got {dims!r}")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            for problem in found:
                logger.error(f"config: {problem}")
            raise ConfigError(found)

    def train_config(self) -> TrainConfig:
        model = self.data['model']
        train = dict(self.data['train'])
        train.setdefault('hidden', model['hidden'])
        train.setdefault('layers', model['layers'])
        train.setdefault('seed', self.seed)
        task = self.data['task']
        for name in ('n_agents', 'n_obstacles', 'map_size', 'horizon'):
            train.setdefault(name, task.get(name))
        train['env'] = self.data['env']
        return TrainConfig.from_dict(train)

    def task_spec(self) -> TaskSpec:
        task = self.data['task']
        return TaskSpec(
            kind=self.env,
            n_agents=int(task['n_agents']),
            n_obstacles=int(task['n_obstacles']),
            map_size=float(task['map_size']),
            seed=int(task['seed']),
            mode=TaskMode(task['mode']),
            horizon=task.get('horizon'),
        )

    def caps(self) -> SubgraphCaps:
        ev = self.data['eval']
        return SubgraphCaps(int(ev['max_agent_edges']), int(ev['max_obstacle_edges']))

    def architecture(self) -> Dict[str, Any]:
        """The model record a checkpoint trained under this config carries"""
        model = self.data['model']
        backbone = Backbone(model['backbone']) if model.get('backbone') else profile(self.env).backbone
        return {
            'env': self.env.value,
            'backbone': backbone.value,
            'hidden': int(model['hidden']),
            'layers': int(model['layers']) if backbone is Backbone.GNN else 0,
            'action_dim': profile(self.env).action_dim,
        }

    def output_root(self) -> Path:
        configured = self.data['output'].get('root')
        if configured:
            return Path(configured)
        load_dotenv()
        return Path(os.environ.get(OUTPUT_ROOT_VAR, DEFAULT_OUTPUT_ROOT))

    def run_dir(self, command: str) -> Path:
        """Per-run artifact directory; identical configs map to the same directory"""
        name = self.data['output'].get('run_name') or f"{self.env.value}-{self.hash[:12]}"
        return self.output_root() / command / name

    def write(self, directory: Union[str, Path]) -> Path:
        """Write the resolved record, its hash and provenance to config.json"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / 'config.json'
        payload = {
            'config': self.data,
            'config_hash': self.hash,
            'source': self.source,
            'overrides': self.overrides,
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n')
        return path
