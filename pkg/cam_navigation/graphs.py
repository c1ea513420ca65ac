"""
Egocentric graph construction and subgraph decomposition
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ContractError
from .models import (
    EnvKind, WorldState, EgoGraph, SubgraphCaps,
    EDGE_AGENT, EDGE_OBSTACLE,
)

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 1.5

AGENT_NODE = np.array([1.0, 0.0])
OBSTACLE_NODE = np.array([0.0, 1.0])

EDGE_WIDTHS = {
    EnvKind.CAR: 8,
    EnvKind.DYNAMIC_DUBINS: 10,
    EnvKind.DRONE: 19,
}


class EdgeFeatures:
    """Per-environment edge feature layouts; obstacle sources are zero padded"""

    @staticmethod
    def edge_type(edge_kind: int) -> np.ndarray:
        onehot = np.zeros(2)
        onehot[edge_kind] = 1.0
        return onehot

    @staticmethod
    def car(source: Optional[np.ndarray], source_pos: np.ndarray, ego: np.ndarray) -> np.ndarray:
        """[type, sin θ_i, cos θ_i, sin θ_j, cos θ_j, Δx, Δy]"""
        if source is None:
            src = np.zeros(2)
            kind = EDGE_OBSTACLE
        else:
            src = np.array([np.sin(source[2]), np.cos(source[2])])
            kind = EDGE_AGENT
        dst = np.array([np.sin(ego[2]), np.cos(ego[2])])
        rel = source_pos[:2] - ego[:2]
        return np.concatenate([EdgeFeatures.edge_type(kind), src, dst, rel])

    @staticmethod
    def dyn_dubins(source: Optional[np.ndarray], source_pos: np.ndarray, ego: np.ndarray) -> np.ndarray:
        """[type, v_i, v_j, sin θ_i, cos θ_i, sin θ_j, cos θ_j, Δx, Δy]"""
        if source is None:
            v_i, trig_i = 0.0, np.zeros(2)
            kind = EDGE_OBSTACLE
        else:
            v_i, trig_i = source[2], np.array([np.sin(source[3]), np.cos(source[3])])
            kind = EDGE_AGENT
        trig_j = np.array([np.sin(ego[3]), np.cos(ego[3])])
        rel = source_pos[:2] - ego[:2]
        return np.concatenate([EdgeFeatures.edge_type(kind), [v_i, ego[2]], trig_i, trig_j, rel])

    @staticmethod
    def drone(source: Optional[np.ndarray], source_pos: np.ndarray, ego: np.ndarray) -> np.ndarray:
        """[type, v_i, trig(α_i, β_i), v_j, trig(α_j, β_j), Δx, Δy, Δz]; Δz is padded for obstacles"""
        def pose(state: np.ndarray) -> np.ndarray:
            alpha, beta = state[6], state[7]
            return np.concatenate([
                state[3:6], [np.sin(alpha), np.cos(alpha), np.sin(beta), np.cos(beta)],
            ])

        if source is None:
            src = np.zeros(7)
            rel = np.array([source_pos[0] - ego[0], source_pos[1] - ego[1], 0.0])
            kind = EDGE_OBSTACLE
        else:
            src = pose(source)
            rel = source[:3] - ego[:3]
            kind = EDGE_AGENT
        return np.concatenate([EdgeFeatures.edge_type(kind), src, pose(ego), rel])


_LAYOUTS = {
    EnvKind.CAR: EdgeFeatures.car,
    EnvKind.DYNAMIC_DUBINS: EdgeFeatures.dyn_dubins,
    EnvKind.DRONE: EdgeFeatures.drone,
}


def edge_width(kind: EnvKind) -> int:
    if kind not in EDGE_WIDTHS:
        raise ContractError(f"environment {kind.value} does not observe graphs")
    return EDGE_WIDTHS[kind]


def build_ego_graph(world: WorldState, agent_id: int, radius: float = DEFAULT_RADIUS) -> EgoGraph:
    """
    Build one agent's star graph from a world snapshot

    Neighbors are the other agents and the obstacles whose center distance to
    the ego is at most `radius`. Drones measure agents in 3D and the infinite
    obstacle cylinders in the horizontal plane. Node 0 is the ego; neighbors
    follow in world order, agents first.

    Args:
        world: World snapshot
        agent_id: Index of the ego agent
        radius: Neighborhood radius

    Returns:
        EgoGraph whose edges all point at node 0
    """
    if world.kind not in _LAYOUTS:
        raise ContractError(f"environment {world.kind.value} does not observe graphs")
    if not 0 <= agent_id < world.n_agents:
        raise ContractError(f"agent id {agent_id} out of range for {world.n_agents} agents")
    if radius <= 0:
        raise ContractError(f"radius must be > 0, got {radius}")

    layout = _LAYOUTS[world.kind]
    ego = world.states[agent_id]
    positions = world.positions

    agent_dist = np.linalg.norm(positions - positions[agent_id], axis=1)
    agent_dist[agent_id] = np.inf
    neighbors = np.flatnonzero(agent_dist <= radius)

    if len(world.obstacles):
        obstacle_dist = np.linalg.norm(world.obstacles - ego[:2], axis=1)
        near_obstacles = np.flatnonzero(obstacle_dist <= radius)
    else:
        near_obstacles = np.zeros(0, dtype=np.int64)

    nodes = [AGENT_NODE]
    features, kinds = [], []
    for j in neighbors:
        nodes.append(AGENT_NODE)
        features.append(layout(world.states[j], positions[j], ego))
        kinds.append(EDGE_AGENT)
    for j in near_obstacles:
        nodes.append(OBSTACLE_NODE)
        features.append(layout(None, world.obstacles[j], ego))
        kinds.append(EDGE_OBSTACLE)

    n_edges = len(features)
    width = EDGE_WIDTHS[world.kind]
    return EgoGraph(
        node_features=np.stack(nodes),
        edge_src=np.arange(1, n_edges + 1),
        edge_dst=np.zeros(n_edges, dtype=np.int64),
        edge_features=np.stack(features) if features else np.zeros((0, width)),
        edge_kinds=np.array(kinds, dtype=np.int64),
        kind=world.kind,
    )


def build_world_graphs(world: WorldState, radius: float = DEFAULT_RADIUS) -> List[EgoGraph]:
    """Ego graphs of every agent in a world"""
    return [build_ego_graph(world, i, radius) for i in range(world.n_agents)]


def within_caps(graph: EgoGraph, caps: SubgraphCaps) -> bool:
    return graph.n_agent_edges <= caps.max_agent_edges and graph.n_obstacle_edges <= caps.max_obstacle_edges


def subgraph(graph: EgoGraph, edge_ids: Sequence[int]) -> EgoGraph:
    """Ego graph restricted to the given edges, with source nodes renumbered from 1"""
    edge_ids = np.asarray(edge_ids, dtype=np.int64)
    sources = graph.edge_src[edge_ids]
    node_rows = [graph.node_features[graph.ego_index]]
    node_rows.extend(graph.node_features[s] for s in sources)
    return EgoGraph(
        node_features=np.stack(node_rows),
        edge_src=np.arange(1, len(edge_ids) + 1),
        edge_dst=np.zeros(len(edge_ids), dtype=np.int64),
        edge_features=graph.edge_features[edge_ids],
        edge_kinds=graph.edge_kinds[edge_ids],
        kind=graph.kind,
    )


def _chunks(ids: np.ndarray, size: int) -> List[np.ndarray]:
    if len(ids) == 0:
        return []
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def decompose(graph: EgoGraph, caps: SubgraphCaps, rng: np.random.Generator) -> List[EgoGraph]:
    """
    Split an out-of-distribution ego graph into subgraphs within caps

    Edges are shuffled per type and packed into chunks of at most the cap;
    agent chunks and obstacle chunks are paired round-robin, so every edge
    lands in at least one subgraph. A type whose cap is 0 has its edges
    dropped; with nothing left the result is the bare ego node.

    Args:
        graph: Ego graph to split
        caps: Per-type edge limits
        rng: Source of the per-type shuffles

    Returns:
        Subgraphs covering every kept edge; the input itself when it is already within caps
    """
    if within_caps(graph, caps):
        return [graph]

    agent_ids = np.flatnonzero(graph.edge_kinds == EDGE_AGENT)
    obstacle_ids = np.flatnonzero(graph.edge_kinds == EDGE_OBSTACLE)
    if len(agent_ids) and caps.max_agent_edges == 0:
        logger.warning(f"agent-edge cap is 0: dropping {len(agent_ids)} agent edge(s)")
        agent_ids = agent_ids[:0]
    if len(obstacle_ids) and caps.max_obstacle_edges == 0:
        logger.warning(f"obstacle-edge cap is 0: dropping {len(obstacle_ids)} obstacle edge(s)")
        obstacle_ids = obstacle_ids[:0]

    agent_chunks = _chunks(rng.permutation(agent_ids), max(caps.max_agent_edges, 1))
    obstacle_chunks = _chunks(rng.permutation(obstacle_ids), max(caps.max_obstacle_edges, 1))
    count = max(len(agent_chunks), len(obstacle_chunks))
    if count == 0:
        return [subgraph(graph, [])]

    pieces = []
    for i in range(count):
        edge_ids = []
        if agent_chunks:
            edge_ids.extend(agent_chunks[i % len(agent_chunks)])
        if obstacle_chunks:
            edge_ids.extend(obstacle_chunks[i % len(obstacle_chunks)])
        pieces.append(subgraph(graph, edge_ids))

    logger.debug(
        f"decomposed graph with {graph.n_agent_edges} agent / {graph.n_obstacle_edges} "
        f"obstacle edges into {len(pieces)} subgraphs"
    )
    return pieces


@dataclass
class GraphBatch:
    """Several ego graphs laid out as one disjoint graph with global node indices"""
    node_features: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_features: np.ndarray
    ego_nodes: np.ndarray
    kind: EnvKind

    @property
    def num_graphs(self) -> int:
        return int(len(self.ego_nodes))

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])


def batch_graphs(graphs: Sequence[EgoGraph]) -> GraphBatch:
    """Stack ego graphs of one environment into a single GraphBatch"""
    if not graphs:
        raise ContractError("cannot batch an empty list of graphs")
    kind = graphs[0].kind
    if any(g.kind is not kind for g in graphs):
        raise ContractError("all graphs in a batch must come from the same environment")

    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    width = graphs[0].edge_features.shape[1]
    return GraphBatch(
        node_features=np.concatenate([g.node_features for g in graphs]),
        edge_src=np.concatenate([g.edge_src + off for g, off in zip(graphs, offsets)]),
        edge_dst=np.concatenate([g.edge_dst + off for g, off in zip(graphs, offsets)]),
        edge_features=np.concatenate([g.edge_features.reshape(-1, width) for g in graphs]),
        ego_nodes=np.array([off + g.ego_index for g, off in zip(graphs, offsets)], dtype=np.int64),
        kind=kind,
    )
