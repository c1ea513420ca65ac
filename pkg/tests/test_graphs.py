"""
Tests for ego-graph construction, batching and subgraph decomposition
"""
import numpy as np
import pytest

from cam_navigation.exceptions import ContractError
from cam_navigation.graphs import (
    EDGE_WIDTHS, batch_graphs, build_ego_graph, build_world_graphs, decompose, edge_width, subgraph,
    within_caps,
)
from cam_navigation.models import EDGE_AGENT, EDGE_OBSTACLE, EgoGraph, EnvKind, SubgraphCaps, WorldState


def _car_world(states, obstacles=(), goals=None):
    states = np.asarray(states, dtype=float)
    goals = np.zeros((len(states), 2)) if goals is None else goals
    return WorldState(EnvKind.CAR, states, goals, np.asarray(obstacles, dtype=float).reshape(-1, 2), 3.0)


def _star(n_agent_edges, n_obstacle_edges, kind=EnvKind.CAR, rng=None):
    """A synthetic ego graph with distinct edge features"""
    rng = rng or np.random.default_rng(0)
    n = n_agent_edges + n_obstacle_edges
    kinds = np.array([EDGE_AGENT] * n_agent_edges + [EDGE_OBSTACLE] * n_obstacle_edges)
    nodes = [[1.0, 0.0]] + [[1.0, 0.0] if k == EDGE_AGENT else [0.0, 1.0] for k in kinds]
    return EgoGraph(
        node_features=np.array(nodes),
        edge_src=np.arange(1, n + 1),
        edge_dst=np.zeros(n, dtype=np.int64),
        edge_features=rng.normal(size=(n, EDGE_WIDTHS[kind])),
        edge_kinds=kinds,
        kind=kind,
    )


def test_car_obstacle_edge_layout():
    world = _car_world([[0.0, 0.0, np.pi / 2]], obstacles=[[1.0, 0.0]])
    graph = build_ego_graph(world, 0, radius=1.5)
    assert graph.num_nodes == 2
    assert graph.num_edges == 1
    expected = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]
    np.testing.assert_allclose(graph.edge_features[0], expected, atol=1e-15)
    np.testing.assert_array_equal(graph.node_features[1], [0.0, 1.0])


def test_car_agent_edge_layout():
    world = _car_world([[0.0, 0.0, 0.0], [0.5, -0.5, np.pi]])
    graph = build_ego_graph(world, 0)
    features = graph.edge_features[0]
    np.testing.assert_allclose(features[:2], [1.0, 0.0])
    np.testing.assert_allclose(features[2:4], [np.sin(np.pi), np.cos(np.pi)])
    np.testing.assert_allclose(features[4:6], [0.0, 1.0])
    np.testing.assert_allclose(features[6:], [0.5, -0.5])


def test_radius_cutoff_leaves_single_node():
    world = _car_world([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], obstacles=[[0.0, 2.0]])
    graph = build_ego_graph(world, 0, radius=1.5)
    assert graph.num_nodes == 1
    assert graph.num_edges == 0
    assert graph.edge_features.shape == (0, 8)


def test_neighbor_at_exact_radius_is_included():
    world = _car_world([[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]])
    assert build_ego_graph(world, 0, radius=1.5).num_edges == 1


def test_dyn_dubins_edge_width():
    states = np.array([[0.0, 0.0, 0.4, 0.0], [0.3, 0.4, 0.8, 1.0]])
    world = WorldState(EnvKind.DYNAMIC_DUBINS, states, np.zeros((2, 2)), np.zeros((0, 2)), 3.0)
    graph = build_ego_graph(world, 0)
    assert graph.edge_features.shape == (1, 2 + 2 + 4 + 2)
    np.testing.assert_allclose(graph.edge_features[0][2:4], [0.8, 0.4])
    np.testing.assert_allclose(graph.edge_features[0][-2:], [0.3, 0.4])


def test_drone_uses_3d_distance_for_agents_and_2d_for_obstacles():
    states = np.zeros((2, 9))
    states[1, :3] = [0.0, 0.0, 2.0]
    world = WorldState(EnvKind.DRONE, states, np.zeros((2, 3)), np.array([[1.0, 0.0]]), 3.0)
    graph = build_ego_graph(world, 0, radius=1.5)
    # the other drone is 2.0 above, the obstacle cylinder is 1.0 away in the plane
    assert graph.n_agent_edges == 0
    assert graph.n_obstacle_edges == 1
    features = graph.edge_features[0]
    assert features.shape == (19,)
    np.testing.assert_array_equal(features[2:9], np.zeros(7))
    np.testing.assert_allclose(features[-3:], [1.0, 0.0, 0.0])


def test_single_agent_environment_has_no_graph():
    world = WorldState(EnvKind.INTEGRATOR, [[0.0, -1.7]], [[0.0, 1.7]], np.zeros((0, 2)), 6.0)
    with pytest.raises(ContractError):
        build_ego_graph(world, 0)
    with pytest.raises(ContractError):
        edge_width(EnvKind.INTEGRATOR)


def test_bad_agent_id_and_radius():
    world = _car_world([[0.0, 0.0, 0.0]])
    with pytest.raises(ContractError):
        build_ego_graph(world, 1)
    with pytest.raises(ContractError):
        build_ego_graph(world, 0, radius=0.0)


def test_every_edge_points_at_ego(car_world):
    for graph in build_world_graphs(car_world):
        assert np.all(graph.edge_dst == 0)
        assert graph.node_features[0, 0] == 1.0


def test_decompose_five_agent_edges():
    graph = _star(5, 0)
    pieces = decompose(graph, SubgraphCaps(2, 9), np.random.default_rng(0))
    assert len(pieces) >= 3
    covered = {tuple(row) for piece in pieces for row in piece.edge_features}
    assert covered == {tuple(row) for row in graph.edge_features}
    assert all(within_caps(piece, SubgraphCaps(2, 9)) for piece in pieces)


def test_decompose_within_caps_returns_input():
    graph = _star(2, 9)
    pieces = decompose(graph, SubgraphCaps(2, 9), np.random.default_rng(0))
    assert len(pieces) == 1
    assert pieces[0] is graph


def test_decompose_edgeless_graph():
    graph = _star(0, 0)
    pieces = decompose(graph, SubgraphCaps(), np.random.default_rng(0))
    assert len(pieces) == 1
    assert pieces[0].num_nodes == 1


def test_decompose_zero_cap_drops_edges_of_that_type():
    graph = _star(3, 12)
    caps = SubgraphCaps(0, 5)
    pieces = decompose(graph, caps, np.random.default_rng(0))
    assert len(pieces) == 3
    covered = {tuple(row) for piece in pieces for row in piece.edge_features}
    assert covered == {tuple(row) for row in graph.edge_features[3:]}
    for piece in pieces:
        assert piece.n_agent_edges == 0
        assert within_caps(piece, caps)


def test_decompose_zero_caps_leave_bare_ego_node():
    graph = _star(3, 2)
    pieces = decompose(graph, SubgraphCaps(0, 0), np.random.default_rng(0))
    assert len(pieces) == 1
    assert pieces[0].num_nodes == 1
    assert pieces[0].num_edges == 0
    np.testing.assert_array_equal(pieces[0].node_features, graph.node_features[:1])


@pytest.mark.parametrize('seed', range(25))
def test_decompose_covers_random_graphs(seed):
    rng = np.random.default_rng(seed)
    n_agents, n_obstacles = rng.integers(0, 21, size=2)
    graph = _star(int(n_agents), int(n_obstacles), rng=rng)
    caps = SubgraphCaps(2, 9)
    pieces = decompose(graph, caps, rng)
    covered = {tuple(row) for piece in pieces for row in piece.edge_features}
    assert covered == {tuple(row) for row in graph.edge_features}
    for piece in pieces:
        assert within_caps(piece, caps)
        assert np.all(piece.edge_dst == 0)
        np.testing.assert_array_equal(piece.node_features[0], [1.0, 0.0])


def test_subgraph_renumbers_sources():
    graph = _star(2, 2)
    piece = subgraph(graph, [3, 0])
    np.testing.assert_array_equal(piece.edge_src, [1, 2])
    np.testing.assert_array_equal(piece.edge_kinds, [EDGE_OBSTACLE, EDGE_AGENT])
    np.testing.assert_array_equal(piece.edge_features, graph.edge_features[[3, 0]])


def test_batch_graphs_offsets():
    graphs = [_star(1, 1), _star(0, 0), _star(2, 0)]
    batch = batch_graphs(graphs)
    assert batch.num_graphs == 3
    assert batch.num_nodes == 3 + 1 + 3
    np.testing.assert_array_equal(batch.ego_nodes, [0, 3, 4])
    np.testing.assert_array_equal(batch.edge_dst, [0, 0, 4, 4])
    np.testing.assert_array_equal(batch.edge_src, [1, 2, 5, 6])


def test_batch_graphs_rejects_mixed_environments():
    with pytest.raises(ContractError):
        batch_graphs([_star(1, 0), _star(1, 0, kind=EnvKind.DYNAMIC_DUBINS)])
    with pytest.raises(ContractError):
        batch_graphs([])
