"""
Control admissibility models: GNN and MLP backbones, batched scoring,
min-composition over decomposed subgraphs and action selection
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Mlp, ParamTensor, Tensor
from .exceptions import ContractError, ShapeError
from .graphs import GraphBatch, batch_graphs, decompose, edge_width
from .models import Backbone, EgoGraph, EnvKind, Observation, ScoredActions, SubgraphCaps
from .worlds import profile

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 64
DEFAULT_LAYERS = 3
NODE_TYPES = 2


class Scorer(Protocol):
    """Anything that maps one observation and N actions to N admissibility scores"""

    def score(self, observation: Observation, actions: np.ndarray) -> np.ndarray:
        ...


@dataclass
class CamModel:
    """
    Admissibility score φ(x, a) = f(h(x), a)

    With the GNN backbone, h is the ego node's embedding after K rounds of
    max-aggregated message passing; with the MLP backbone, h is the raw state
    feature vector and f is the whole network.
    """
    kind: EnvKind
    backbone: Backbone
    hidden: int
    layers: int
    action_dim: int
    head: Mlp
    node_embed: Optional[Mlp] = None
    edge_embed: Optional[Mlp] = None
    message: List[Mlp] = field(default_factory=list)
    update: List[Mlp] = field(default_factory=list)

    @classmethod
    def initialize(cls, kind: EnvKind, backbone: Optional[Backbone] = None, hidden: int = DEFAULT_HIDDEN,
                   layers: int = DEFAULT_LAYERS, rng: Optional[np.random.Generator] = None) -> 'CamModel':
        """
        Build a freshly initialized model for an environment

        Args:
            kind: Environment the model scores
            backbone: Network family; defaults to the environment's
            hidden: Hidden width H
            layers: Number of message-passing rounds K (GNN only)
            rng: Generator for the weight init

        Returns:
            CamModel with Glorot-uniform weights and zero biases
        """
        prof = profile(kind)
        backbone = backbone or prof.backbone
        rng = rng if rng is not None else np.random.default_rng(0)
        ad = prof.action_dim
        if hidden < 1:
            raise ContractError(f"hidden width must be >= 1, got {hidden}")

        if backbone is Backbone.MLP:
            if kind.uses_graph:
                raise ContractError(f"{kind.value} observes graphs and needs the GNN backbone")
            head = Mlp.initialize('head', [prof.feature_dim + ad, hidden, hidden, 1], rng, final_activation='none')
            return cls(kind, backbone, hidden, 0, ad, head)

        if not kind.uses_graph:
            raise ContractError(f"{kind.value} observes raw vectors and needs the MLP backbone")
        if layers < 1:
            raise ContractError(f"a GNN needs at least one layer, got {layers}")
        return cls(
            kind=kind,
            backbone=backbone,
            hidden=hidden,
            layers=layers,
            action_dim=ad,
            head=Mlp.initialize('head', [hidden + ad, hidden, 1], rng, final_activation='none'),
            node_embed=Mlp.initialize('node_embed', [NODE_TYPES, hidden, hidden], rng),
            edge_embed=Mlp.initialize('edge_embed', [edge_width(kind), hidden, hidden], rng),
            message=[Mlp.initialize(f"message.{k}", [hidden, hidden, hidden], rng) for k in range(layers)],
            update=[Mlp.initialize(f"update.{k}", [2 * hidden, hidden, hidden], rng) for k in range(layers)],
        )

    def parameters(self) -> List[ParamTensor]:
        """All parameters in declaration order"""
        params: List[ParamTensor] = []
        if self.backbone is Backbone.GNN:
            params.extend(self.node_embed.parameters())
            params.extend(self.edge_embed.parameters())
            for message, update in zip(self.message, self.update):
                params.extend(message.parameters())
                params.extend(update.parameters())
        params.extend(self.head.parameters())
        return params

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def architecture(self) -> Dict[str, Any]:
        return {
            'env': self.kind.value,
            'backbone': self.backbone.value,
            'hidden': self.hidden,
            'layers': self.layers,
            'action_dim': self.action_dim,
        }

    def hidden_batch(self, observations: Sequence[Observation]) -> Tensor:
        """Hidden rows h for several observations, shape (B, width)"""
        if self.backbone is Backbone.MLP:
            rows = np.stack([np.asarray(o, dtype=np.float64).reshape(-1) for o in observations])
            if rows.shape[1] != self.head.layers[0].in_width - self.action_dim:
                raise ShapeError(f"expected {self.head.layers[0].in_width - self.action_dim} state features, got {rows.shape[1]}")
            return Tensor(rows)
        return gnn_hidden_batch(self, batch_graphs(list(observations)))

    def head_scores(self, hidden_rows: Tensor, actions: np.ndarray) -> Tensor:
        """f(h, a) row by row, shape (B,)"""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, self.action_dim)
        out = self.head(dc.concat([hidden_rows, Tensor(actions)], axis=1))
        return dc.reshape(out, (-1,))

    def score(self, observation: Observation, actions: np.ndarray) -> np.ndarray:
        return cam_score_batch(self, observation, actions)


def gnn_hidden_batch(model: CamModel, batch: GraphBatch) -> Tensor:
    """
    Message passing over a batch of disjoint ego graphs

    Each round adds the max over incoming edges of f_m(edge embedding) to the
    destination node, then updates every edge with f_n([destination, edge]).
    Nodes without incoming edges add the zero vector.

    Returns:
        Ego-node embeddings, one row per graph
    """
    if batch.kind is not model.kind:
        raise ContractError(f"model scores {model.kind.value} graphs, got {batch.kind.value}")
    if batch.edge_features.shape[1] != model.edge_embed.layers[0].in_width:
        raise ShapeError(
            f"edge features have width {batch.edge_features.shape[1]}, "
            f"model expects {model.edge_embed.layers[0].in_width}"
        )
    nodes = model.node_embed(batch.node_features)
    edges = model.edge_embed(batch.edge_features)
    for message, update in zip(model.message, model.update):
        nodes = nodes + dc.segment_max(message(edges), batch.edge_dst, batch.num_nodes)
        edges = edges + update(dc.concat([dc.take_rows(nodes, batch.edge_dst), edges], axis=1))
    return dc.take_rows(nodes, batch.ego_nodes)


def gnn_hidden(model: CamModel, graph: EgoGraph) -> Tensor:
    """Hidden vector h of one ego graph"""
    return dc.reshape(gnn_hidden_batch(model, batch_graphs([graph])), (-1,))


def _tile_hidden(hidden_row: Tensor, n: int) -> Tensor:
    return dc.take_rows(hidden_row, np.zeros(n, dtype=np.int64))


def cam_score_batch(model: CamModel, observation: Observation, actions: np.ndarray) -> np.ndarray:
    """Scores of N actions at one observation, computing h once"""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, model.action_dim)
    hidden = model.hidden_batch([observation])
    return model.head_scores(_tile_hidden(hidden, len(actions)), actions).value.copy()


def score_pairs(model: CamModel, observations: Sequence[Observation], actions: np.ndarray) -> Tensor:
    """Differentiable φ(x_b, a_b) for paired observations and actions"""
    if len(observations) == 0:
        return Tensor(np.zeros(0))
    return model.head_scores(model.hidden_batch(observations), actions)


def compose_min(score_lists: Sequence[Sequence[float]]) -> np.ndarray:
    """Elementwise minimum of equally long score sequences"""
    if len(score_lists) == 0:
        raise ContractError("compose_min needs at least one score list")
    lengths = {len(s) for s in score_lists}
    if len(lengths) != 1:
        raise ContractError(f"score lists have different lengths: {sorted(lengths)}")
    composed = np.full(lengths.pop(), np.inf)
    for scores in score_lists:
        composed = np.minimum(composed, np.asarray(scores, dtype=np.float64))
    return composed


def score_with_decomposition(model: CamModel, graph: Observation, actions: np.ndarray,
                             caps: SubgraphCaps, rng: np.random.Generator) -> np.ndarray:
    """
    Min-composed scores over a decomposition of the graph

    A graph already within caps is scored directly.
    """
    if not isinstance(graph, EgoGraph):
        return cam_score_batch(model, graph, actions)
    pieces = decompose(graph, caps, rng)
    if len(pieces) == 1:
        return cam_score_batch(model, pieces[0], actions)
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, model.action_dim)
    hidden = model.hidden_batch(pieces)
    scores = [
        model.head_scores(_tile_hidden(dc.take_rows(hidden, [i]), len(actions)), actions).value
        for i in range(len(pieces))
    ]
    return compose_min(scores)


@dataclass
class _AgentSubgraphs:
    owners: np.ndarray
    pieces: List[Observation]


def _split_agents(observations: Sequence[Observation], caps: Optional[SubgraphCaps],
                  rng: Optional[np.random.Generator]) -> _AgentSubgraphs:
    owners, pieces = [], []
    for agent, observation in enumerate(observations):
        if caps is not None and isinstance(observation, EgoGraph):
            if rng is None:
                raise ContractError("decomposition needs a random generator")
            parts = decompose(observation, caps, rng)
        else:
            parts = [observation]
        owners.extend([agent] * len(parts))
        pieces.extend(parts)
    return _AgentSubgraphs(np.array(owners, dtype=np.int64), pieces)


def _per_agent_candidates(candidates: np.ndarray, n_agents: int, action_dim: int) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim == 2:
        candidates = np.broadcast_to(candidates, (n_agents,) + candidates.shape)
    if candidates.shape[0] != n_agents or candidates.shape[-1] != action_dim:
        raise ShapeError(f"candidates of shape {candidates.shape} for {n_agents} agents")
    return candidates


def _score_split(model: CamModel, split: _AgentSubgraphs, hidden: np.ndarray,
                 agents: Sequence[int], candidates: np.ndarray) -> List[np.ndarray]:
    """Head pass for (subgraph, candidate) rows of the given agents, min-reduced per agent"""
    rows = [np.flatnonzero(split.owners == a) for a in agents]
    n = candidates.shape[1]
    hidden_index = np.concatenate([np.repeat(r, n) for r in rows]) if rows else np.zeros(0, dtype=np.int64)
    action_rows = np.concatenate([
        np.tile(candidates[a], (len(r), 1)) for a, r in zip(agents, rows)
    ]) if rows else np.zeros((0, model.action_dim))
    if len(hidden_index) == 0:
        return []
    flat = model.head_scores(Tensor(hidden[hidden_index]), action_rows).value

    out, start = [], 0
    for r in rows:
        block = flat[start:start + len(r) * n].reshape(len(r), n)
        out.append(block.min(axis=0))
        start += len(r) * n
    return out


def score_agents(model: CamModel, observations: Sequence[Observation], candidates: np.ndarray,
                 caps: Optional[SubgraphCaps] = None,
                 rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """
    Scores of every agent's candidates in one hidden pass and one head pass

    Args:
        model: CAM to evaluate
        observations: One observation per agent
        candidates: Shared (N, ad) candidates or per-agent (A, N, ad)
        caps: When given, graphs are decomposed and scores min-composed
        rng: Generator for the decomposition shuffles

    Returns:
        One (N,) score array per agent
    """
    if len(observations) == 0:
        return []
    candidates = _per_agent_candidates(candidates, len(observations), model.action_dim)
    split = _split_agents(observations, caps, rng)
    hidden = model.hidden_batch(split.pieces).value
    return _score_split(model, split, hidden, list(range(len(observations))), candidates)


def select_index(scored: ScoredActions) -> Tuple[int, bool]:
    """Chosen candidate index and whether it is admissible"""
    if len(scored) == 0:
        raise ContractError("cannot select from an empty candidate set")
    admissible = scored.phi >= 0
    if np.any(admissible):
        masked = np.where(admissible, scored.omega, -np.inf)
        return int(np.argmax(masked)), True
    return int(np.argmax(scored.phi)), False


def select_action(scored: ScoredActions, noise_mag: Union[float, np.ndarray], rng: np.random.Generator,
                  action_box: Tuple[np.ndarray, np.ndarray], epsilon: float = 0.0) -> np.ndarray:
    """
    Pick the most preferred admissible action, or fall back to the most admissible one

    Args:
        scored: Candidates with their φ and ω
        noise_mag: Per-dimension half-width of the uniform noise added in the fallback
        rng: Noise source
        action_box: (low, high) bounds the result is clipped to
        epsilon: Probability of a uniformly random action instead (0 disables)

    Returns:
        The selected action vector
    """
    low, high = (np.asarray(b, dtype=np.float64) for b in action_box)
    if epsilon > 0 and rng.random() < epsilon:
        return rng.uniform(low, high)
    index, admissible = select_index(scored)
    action = scored.actions[index].copy()
    if not admissible and np.any(np.asarray(noise_mag) > 0):
        magnitude = np.broadcast_to(np.asarray(noise_mag, dtype=np.float64), action.shape)
        action = action + rng.uniform(-magnitude, magnitude)
    return np.clip(action, low, high)


def admissible_ratio(scored: Union[ScoredActions, np.ndarray]) -> float:
    """Fraction of candidates with φ >= 0"""
    phi = scored.phi if isinstance(scored, ScoredActions) else np.asarray(scored)
    if len(phi) == 0:
        return 0.0
    return float(np.count_nonzero(phi >= 0) / len(phi))


def adaptive_agent_scoring(model: CamModel, observations: Sequence[Observation], candidates: np.ndarray,
                           preferences: np.ndarray, chunk_size: int, caps: Optional[SubgraphCaps] = None,
                           rng: Optional[np.random.Generator] = None) -> List[ScoredActions]:
    """
    Score candidates chunk by chunk, dropping agents that already found an admissible action

    Hidden states are computed once for all agents; each round runs one head
    pass over the next chunk of the still-undecided agents.

    Args:
        model: CAM to evaluate
        observations: One observation per agent
        candidates: Shared (N, ad) or per-agent (A, N, ad) candidates
        preferences: (A, N) preference scores of the candidates
        chunk_size: Candidates per round
        caps: When given, graphs are decomposed and scores min-composed
        rng: Generator for the decomposition shuffles

    Returns:
        Per-agent ScoredActions over the evaluated prefix of candidates
    """
    if chunk_size < 1:
        raise ContractError(f"chunk size must be >= 1, got {chunk_size}")
    n_agents = len(observations)
    if n_agents == 0:
        return []
    candidates = _per_agent_candidates(candidates, n_agents, model.action_dim)
    preferences = np.asarray(preferences, dtype=np.float64).reshape(n_agents, -1)
    total = candidates.shape[1]

    split = _split_agents(observations, caps, rng)
    hidden = model.hidden_batch(split.pieces).value
    evaluated: List[List[np.ndarray]] = [[] for _ in range(n_agents)]
    pending = list(range(n_agents))
    offset = 0
    while pending and offset < total:
        stop = min(offset + chunk_size, total)
        chunk_scores = _score_split(model, split, hidden, pending, candidates[:, offset:stop])
        still = []
        for agent, scores in zip(pending, chunk_scores):
            evaluated[agent].append(scores)
            if not np.any(scores >= 0):
                still.append(agent)
        pending = still
        offset = stop

    results = []
    for agent in range(n_agents):
        phi = np.concatenate(evaluated[agent])
        count = len(phi)
        results.append(ScoredActions(candidates[agent, :count], phi, preferences[agent, :count]))
    logger.debug(f"adaptive scoring: {n_agents} agents, {sum(len(r) for r in results)} of {n_agents * total} pairs scored")
    return results
