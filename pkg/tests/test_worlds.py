"""
Tests for dynamics, collision and goal predicates, task sampling and preferences
"""
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from cam_navigation.exceptions import ContractError, DensityError, NumericError
from cam_navigation.models import EnvKind, TaskMode, TaskSpec, WorldState
from cam_navigation.worlds import (
    DEFAULT_DANGER_REGIONS, GRAVITY, PROFILES, advance, chasing_retarget, chasing_reward,
    check_collisions, check_goal, clamp_action, clamp_count, derangement, drone_linearization,
    drone_lqr_gain, load_danger_regions, lqr_action, lqr_gain, observe, preference_l2,
    preference_lqr_drone, preferences, profile, region_collisions, sample_task, step_car, step_drone, step_dyn_dubins,
    step_integrator, step_world, trajectory_records,
)


def _world(kind, states, goals=None, obstacles=(), **kwargs):
    states = np.asarray(states, dtype=float)
    dims = kind.position_dims
    goals = np.full((len(states), dims), 10.0) if goals is None else np.asarray(goals, dtype=float)
    return WorldState(kind, states, goals, np.asarray(obstacles, dtype=float).reshape(-1, 2), 3.0, **kwargs)


# --- dynamics ---------------------------------------------------------------

def test_car_straight():
    np.testing.assert_allclose(step_car([0.0, 0.0, 0.0], [0.0]), [0.0, 0.05, 0.0])


def test_car_turning():
    expected = [0.05 * np.sin(0.1), 0.05 * np.cos(0.1), 0.1]
    np.testing.assert_allclose(step_car([0.0, 0.0, 0.0], [0.1]), expected)
    np.testing.assert_allclose(expected, [0.004992, 0.049750, 0.1], atol=1e-6)


def test_car_heading_wraps():
    nxt = step_car([0.0, 0.0, 2 * np.pi - 0.05], [0.1])
    assert nxt[2] == pytest.approx(0.05)


def test_car_clamps_and_counts_out_of_box_actions():
    nxt = step_car([0.0, 0.0, 0.0], [5.0])
    assert nxt[2] == pytest.approx(2 * np.pi / 3)
    assert clamp_count(EnvKind.CAR) == 1


def test_dyn_dubins_zero_speed_holds_position():
    nxt = step_dyn_dubins([1.0, 2.0, 0.0, 0.3], [0.0, 1.0])
    np.testing.assert_allclose(nxt[:2], [1.0, 2.0])


def test_dyn_dubins_speed_saturates():
    assert step_dyn_dubins([0.0, 0.0, 1.0, 0.0], [1.0, 0.0])[2] == 1.0


def test_dyn_dubins_forward():
    np.testing.assert_allclose(step_dyn_dubins([0.0, 0.0, 0.5, 0.0], [0.0, 0.0]), [0.0, 0.025, 0.5, 0.0])


def test_drone_hover_is_fixed_point():
    nxt = step_drone(np.zeros(9), [GRAVITY, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(nxt, np.zeros(9), atol=1e-12)


def test_drone_free_fall():
    nxt = step_drone(np.zeros(9), [0.0, 0.0, 0.0, 0.0])
    assert nxt[5] == pytest.approx(-0.98)
    assert nxt[2] == pytest.approx(-9.8 * 0.01 ** 2 * 45)
    assert nxt[2] == pytest.approx(-0.0441)


def test_drone_angle_clamp():
    state = np.zeros(9)
    state[6] = np.pi / 2 - 0.01
    nxt = step_drone(state, [GRAVITY, 1.0, 0.0, 0.0])
    assert nxt[6] == pytest.approx(np.pi / 2)


def test_drone_world_step_adds_thrust_offset():
    nxt = advance(EnvKind.DRONE, np.zeros((1, 9)), np.zeros((1, 4)), thrust_offset=GRAVITY)
    np.testing.assert_allclose(nxt, np.zeros((1, 9)), atol=1e-12)


def test_drone_world_step_clamps_before_thrust_offset():
    actions = np.array([[3.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    nxt = advance(EnvKind.DRONE, np.zeros((2, 9)), actions, thrust_offset=GRAVITY)
    np.testing.assert_allclose(nxt[0], nxt[1], atol=1e-12)
    assert nxt[0, 5] == pytest.approx(0.1)
    assert clamp_count(EnvKind.DRONE) == 1


def test_clamp_counter_is_exact_under_threads():
    actions = np.full((3, 2), 5.0)
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda _: clamp_action(EnvKind.INTEGRATOR, actions), range(400)))
    assert clamp_count(EnvKind.INTEGRATOR) == 1200
    assert clamp_count() == 1200


@pytest.mark.parametrize('action, expected', [
    ([0.0, 0.0], [0.2, -0.4]),
    ([1.0, 0.0], [0.25, -0.4]),
    ([-1.0, -1.0], [0.15, -0.45]),
])
def test_integrator(action, expected):
    np.testing.assert_allclose(step_integrator([0.2, -0.4], action), expected)


def test_steppers_are_vectorized():
    states = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    actions = np.array([[0.1], [-0.2]])
    batched = step_car(states, actions)
    for i in range(2):
        np.testing.assert_allclose(batched[i], step_car(states[i], actions[i]))


# --- predicates -------------------------------------------------------------

def test_agents_closer_than_threshold_collide():
    world = _world(EnvKind.CAR, [[0.0, 0.0, 0.0], [0.29, 0.0, 0.0], [2.0, 2.0, 0.0]])
    np.testing.assert_array_equal(check_collisions(world), [True, True, False])


def test_exact_threshold_is_safe():
    world = _world(EnvKind.CAR, [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]])
    np.testing.assert_array_equal(check_collisions(world), [False, False])


def test_drone_obstacle_cylinder_has_infinite_height():
    state = np.zeros((1, 9))
    state[0, :3] = [1.0, 1.0, 5.0]
    world = _world(EnvKind.DRONE, state, obstacles=[[1.1, 1.0]])
    assert check_collisions(world)[0]


def test_drone_agents_use_3d_distance():
    states = np.zeros((2, 9))
    states[1, 2] = 1.0
    assert not check_collisions(_world(EnvKind.DRONE, states)).any()


@pytest.mark.parametrize('seed', range(5))
def test_collision_predicate_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    states = np.column_stack([rng.uniform(0, 1, size=(8, 2)), np.zeros(8)])
    world = _world(EnvKind.CAR, states)
    flags = check_collisions(world)
    gaps = np.linalg.norm(states[:, None, :2] - states[None, :, :2], axis=-1)
    np.fill_diagonal(gaps, np.inf)
    for i in range(8):
        partners = np.flatnonzero(gaps[i] < 0.3)
        assert flags[i] == bool(len(partners))
        assert all(flags[j] for j in partners)


def test_danger_regions_use_disc_intersection():
    hits = region_collisions(np.array([[0.0, 0.3], [0.0, 0.45], [0.8, 0.0]]), DEFAULT_DANGER_REGIONS)
    np.testing.assert_array_equal(hits, [True, False, False])


def test_integrator_collides_with_danger_region():
    world = WorldState(EnvKind.INTEGRATOR, [[0.0, 0.0]], [[0.0, 1.7]], np.zeros((0, 2)), 6.0,
                       danger_regions=DEFAULT_DANGER_REGIONS)
    assert check_collisions(world)[0]


@pytest.mark.parametrize('distance, reached', [(0.44, True), (0.46, False), (0.0, True)])
def test_goal_threshold(distance, reached):
    assert check_goal(np.array([distance, 0.0, 0.0]), np.zeros(2), EnvKind.CAR) is reached


def test_single_agent_goal_uses_intersection():
    assert check_goal(np.array([0.0, 1.45]), np.array([0.0, 1.7]), EnvKind.INTEGRATOR)
    assert not check_goal(np.array([0.0, 1.35]), np.array([0.0, 1.7]), EnvKind.INTEGRATOR)


# --- task sampling ----------------------------------------------------------

def test_sample_task_is_deterministic():
    spec = TaskSpec(EnvKind.CAR, n_agents=3, n_obstacles=2, map_size=3.0, seed=7)
    a, b = sample_task(spec), sample_task(spec)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.goals, b.goals)
    np.testing.assert_array_equal(a.obstacles, b.obstacles)


def test_sample_task_without_obstacles():
    world = sample_task(TaskSpec(EnvKind.CAR, n_agents=3, n_obstacles=0, seed=1))
    assert world.obstacles.shape == (0, 2)


def test_sample_task_density_error():
    with pytest.raises(DensityError):
        sample_task(TaskSpec(EnvKind.CAR, n_agents=512, n_obstacles=0, map_size=3.0))


@pytest.mark.parametrize('kind', [EnvKind.CAR, EnvKind.DYNAMIC_DUBINS, EnvKind.DRONE])
@pytest.mark.parametrize('seed', range(4))
def test_sampled_worlds_start_collision_free(kind, seed):
    world = sample_task(TaskSpec(kind, n_agents=8, n_obstacles=8, map_size=3.0, seed=seed))
    assert world.states.shape == (8, profile(kind).state_dim)
    assert world.goals.shape == (8, kind.position_dims)
    assert not check_collisions(world).any()
    assert np.all(world.states[:, :2] >= 0) and np.all(world.states[:, :2] <= 3.0)


def test_sample_task_with_zero_agents():
    world = sample_task(TaskSpec(EnvKind.DYNAMIC_DUBINS, n_agents=0, n_obstacles=2))
    assert world.states.shape == (0, 4)
    assert world.goals.shape == (0, 2)


def test_single_agent_tasks():
    integrator = sample_task(TaskSpec(EnvKind.INTEGRATOR, n_agents=1, n_obstacles=0, seed=3))
    np.testing.assert_array_equal(integrator.states, [[0.0, -1.7]])
    np.testing.assert_array_equal(integrator.goals, [[0.0, 1.7]])
    assert integrator.danger_regions == DEFAULT_DANGER_REGIONS

    dubins = sample_task(TaskSpec(EnvKind.DUBINS_SINGLE, n_agents=1, n_obstacles=0, seed=3))
    x, y, v, theta = dubins.states[0]
    assert -0.25 <= x <= 0.25
    assert y == -1.7 and v == 0.0
    assert theta == pytest.approx(np.pi / 2)
    assert not check_collisions(dubins).any()


def test_single_agent_task_rejects_more_agents():
    with pytest.raises(ContractError):
        sample_task(TaskSpec(EnvKind.INTEGRATOR, n_agents=2))


def test_load_danger_regions_matches_default_layout(tmp_path):
    path = tmp_path / 'regions.json'
    path.write_text(json.dumps({'regions': [list(r) for r in DEFAULT_DANGER_REGIONS]}))
    assert load_danger_regions(path) == DEFAULT_DANGER_REGIONS


def test_load_danger_regions_rejects_inverted_box(tmp_path):
    path = tmp_path / 'regions.json'
    path.write_text(json.dumps({'regions': [[1.0, 0.0, 0.0, 1.0]]}))
    with pytest.raises(ContractError):
        load_danger_regions(path)


# --- stepping worlds --------------------------------------------------------

def test_step_world_freezes_reached_agents():
    world = _world(EnvKind.CAR, [[0.0, 0.0, 0.0], [2.0, 2.0, 0.0]], reached=np.array([True, False]))
    result = step_world(world, np.array([[0.5], [0.5]]))
    np.testing.assert_array_equal(result.world.states[0], world.states[0])
    assert not np.array_equal(result.world.states[1], world.states[1])
    assert result.world.t == 1


def test_step_world_reached_flags_are_sticky():
    world = _world(EnvKind.CAR, [[0.0, 0.0, 0.0]], goals=[[0.0, 0.3]])
    first = step_world(world, np.zeros((1, 1)))
    assert first.at_goal[0] and first.world.reached[0]


def test_trajectory_records():
    world = _world(EnvKind.CAR, [[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]])
    result = step_world(world, np.zeros((2, 1)))
    records = trajectory_records(world, result)
    assert [r['agent'] for r in records] == [0, 1]
    assert records[0]['collision'] is True
    assert set(records[0]) == {'t', 'agent', 'state', 'action', 'next_state', 'collision', 'goal'}
    json.dumps(records)


def test_observe_single_agent_features():
    world = WorldState(EnvKind.DUBINS_SINGLE, [[0.1, -1.7, 0.5, np.pi / 2]], [[0.0, 1.7]], np.zeros((0, 2)), 6.0)
    np.testing.assert_allclose(observe(world, 0), [0.1, -1.7, 0.5, 1.0, 0.0], atol=1e-15)


# --- preferences ------------------------------------------------------------

def test_integrator_preference():
    world = WorldState(EnvKind.INTEGRATOR, [[0.0, 0.0]], [[0.0, 1.0]], np.zeros((0, 2)), 6.0)
    assert preference_l2(world, 0, np.array([0.0, 1.0]), np.array([0.0, 1.0])) == pytest.approx(-0.9025)
    toward = preference_l2(world, 0, np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    away = preference_l2(world, 0, np.array([0.0, 1.0]), np.array([0.0, -1.0]))
    assert toward > away


def test_integrator_preference_at_goal():
    world = WorldState(EnvKind.INTEGRATOR, [[0.4, 0.4]], [[0.4, 0.4]], np.zeros((0, 2)), 6.0)
    assert preference_l2(world, 0, np.array([0.4, 0.4]), np.zeros(2)) == 0.0


def test_preference_batches_match_single_calls():
    world = _world(EnvKind.DYNAMIC_DUBINS, [[1.0, 1.0, 0.5, 0.2]], goals=[[2.0, 2.0]])
    actions = PROFILES[EnvKind.DYNAMIC_DUBINS].sample_actions(6, np.random.default_rng(0))
    batch = preferences(world, 0, actions)
    for a, score in zip(actions, batch):
        assert preference_l2(world, 0, world.goals[0], a) == pytest.approx(score)


def test_lqr_preference_is_zero_at_reference():
    gain = drone_lqr_gain()
    state = np.zeros(9)
    state[:3] = [1.0, 0.5, 0.2]
    goal = np.array([1.5, 1.0, 1.0])
    reference = lqr_action(state, goal, gain)
    assert preference_lqr_drone(state, goal, reference, gain) == 0.0
    rng = np.random.default_rng(3)
    scores = preference_lqr_drone(state, goal, rng.uniform(-1, 1, size=(50, 4)), gain)
    assert np.all(scores <= 0)


def test_lqr_hover_reference_is_clamped():
    reference = lqr_action(np.zeros(9), np.zeros(3), drone_lqr_gain())
    np.testing.assert_allclose(reference, [1.0, 0.0, 0.0, 0.0])


def test_drone_preferences_use_offset_feedforward():
    world = _world(EnvKind.DRONE, np.zeros((1, 9)), goals=np.zeros((1, 3)))
    scores = preferences(world, 0, np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]))
    # at hover with the default offset the reference action is zero
    assert scores[0] == pytest.approx(0.0)
    assert scores[1] == pytest.approx(-1.0)


def _riccati_oracle(A, B, Q, R):
    P = solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def test_lqr_gain_double_integrator_matches_scipy():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    Q, R = np.eye(2), np.eye(1)
    np.testing.assert_allclose(lqr_gain(A, B, Q, R), _riccati_oracle(A, B, Q, R), atol=1e-6)


def test_lqr_gain_without_input_is_zero():
    A = 0.5 * np.eye(2)
    B = np.zeros((2, 1))
    np.testing.assert_array_equal(lqr_gain(A, B, np.eye(2), np.eye(1)), np.zeros((1, 2)))


@pytest.mark.parametrize('scale', [0.1, 1.0, 10.0])
def test_lqr_gain_sign_pattern_is_scale_free(scale):
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    gain = lqr_gain(A, B, scale * np.eye(2), np.eye(1))
    np.testing.assert_array_equal(np.sign(gain), np.sign(lqr_gain(A, B, np.eye(2), np.eye(1))))
    np.testing.assert_allclose(gain, _riccati_oracle(A, B, scale * np.eye(2), np.eye(1)), atol=1e-6)


def test_drone_gain_matches_scipy():
    A, B = drone_linearization()
    np.testing.assert_allclose(drone_lqr_gain(), _riccati_oracle(A, B, np.eye(9), np.eye(4)), atol=1e-6)


def test_lqr_gain_reports_non_convergence():
    A = 2.0 * np.eye(2)
    B = np.zeros((2, 1))
    with pytest.raises(NumericError):
        lqr_gain(A, B, np.eye(2), np.eye(1), max_iter=50)


# --- chasing ----------------------------------------------------------------

@pytest.mark.parametrize('d_prev, d_cur, reward', [(2.0, 1.5, 0.5), (1.5, 3.0, 0.0), (5.0, 1.0, 2.0)])
def test_chasing_reward(d_prev, d_cur, reward):
    assert chasing_reward(d_prev, d_cur) == pytest.approx(reward)


def test_two_agents_chase_each_other():
    world = sample_task(TaskSpec(EnvKind.CAR, n_agents=2, mode=TaskMode.CHASING, seed=4))
    np.testing.assert_array_equal(world.targets, [1, 0])
    np.testing.assert_array_equal(world.goals, world.positions[[1, 0]])


def test_chasing_assignment_is_fixed_and_goals_follow():
    world = sample_task(TaskSpec(EnvKind.CAR, n_agents=5, mode=TaskMode.CHASING, seed=9))
    result = step_world(world, np.zeros((5, 1)))
    np.testing.assert_array_equal(result.world.targets, world.targets)
    np.testing.assert_array_equal(result.world.goals, chasing_retarget(result.world))
    np.testing.assert_array_equal(result.world.goals, result.world.positions[world.targets])


def test_seeded_derangement_is_deterministic():
    a = derangement(64, np.random.default_rng(21))
    b = derangement(64, np.random.default_rng(21))
    np.testing.assert_array_equal(a, b)
    assert not np.any(a == np.arange(64))
    assert sorted(a) == list(range(64))


def test_retarget_without_assignment():
    with pytest.raises(ContractError):
        chasing_retarget(_world(EnvKind.CAR, [[0.0, 0.0, 0.0]]))
