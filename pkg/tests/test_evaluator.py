"""
Tests for metrics, greedy evaluation, sweeps, invariance analysis and landscapes
"""
import json

import numpy as np
import pandas as pd
import pytest

from cam_navigation.evaluator import (
    TIMING_COLUMNS, chasing_episode_reward, classify_state, decision_timing, density_sweep,
    episode_reward, evaluate, export_landscape, invariance_analysis, run_chasing, safety_rate,
    seeded_tasks, visited_states, write_landscape, write_metrics_table, write_trajectories,
)
from cam_navigation.exceptions import ContractError
from cam_navigation.models import AgentTrace, EnvKind, Label, Metrics, Region, TaskSpec, Transition
from cam_navigation.worlds import PROFILES

BOX = (np.array([-1.0]), np.array([1.0]))


class LevelScorer:
    """Observation 0 is safe for every action, 2 for none, anything else only for a >= 0"""

    def score(self, observation, actions):
        level = int(observation[0])
        if level == 0:
            return np.ones(len(actions))
        if level == 2:
            return -np.ones(len(actions))
        return np.where(actions[:, 0] >= 0, 1.0, -1.0)


def _quick_tasks(n_tasks=3, **overrides):
    base = dict(n_agents=3, n_obstacles=2, map_size=3.0, seed=0, horizon=4)
    base.update(overrides)
    return seeded_tasks(TaskSpec(EnvKind.CAR, **base), n_tasks)


def _outcome(metrics):
    data = metrics.to_dict()
    for column in TIMING_COLUMNS:
        data.pop(column)
    return data


# --- metrics ----------------------------------------------------------------

def test_safety_rate_averages_agents():
    traces = [AgentTrace(0, [False, True, False, False], [False] * 4), AgentTrace(1, [False] * 4, [False] * 4)]
    assert safety_rate(traces) == pytest.approx(0.875)


def test_episode_reward():
    traces = [
        AgentTrace(0, [False, True, False, False], [False, False, True, True]),
        AgentTrace(1, [False] * 4, [False] * 4),
    ]
    assert episode_reward(traces) == pytest.approx((8.6 + -0.4) / 2)


def test_chasing_reward_sums_clipped_progress():
    trace = AgentTrace(0, [False] * 3, [False] * 3, distances=[3.0, 2.0, 2.5, 0.0])
    assert chasing_episode_reward([trace]) == pytest.approx(3.0)


def test_metrics_need_traces():
    for metric in (safety_rate, episode_reward, chasing_episode_reward):
        with pytest.raises(ContractError):
            metric([])


def test_seeded_tasks_are_consecutive():
    tasks = seeded_tasks(TaskSpec(EnvKind.CAR, seed=5), 3)
    assert [t.seed for t in tasks] == [5, 6, 7]


# --- evaluation -------------------------------------------------------------

def test_evaluation_is_deterministic(small_car_model):
    tasks = _quick_tasks()
    first = evaluate(small_car_model, tasks, n_candidates=8, seed=3)
    second = evaluate(small_car_model, tasks, n_candidates=8, seed=3)
    assert _outcome(first.metrics) == _outcome(second.metrics)
    assert first.metrics.task_count == 3
    assert first.metrics.seeds == (0, 1, 2)
    assert 0.0 <= first.metrics.safety_rate <= 1.0


def test_parallel_workers_do_not_change_results(small_car_model):
    tasks = _quick_tasks(4)
    serial = evaluate(small_car_model, tasks, n_candidates=8, seed=1)
    parallel = evaluate(small_car_model, tasks, n_candidates=8, seed=1, workers=3)
    assert _outcome(serial.metrics) == _outcome(parallel.metrics)


def test_decomposition_is_exact_for_sparse_tasks(small_car_model):
    tasks = _quick_tasks(2, n_agents=2, n_obstacles=0)
    with_caps = evaluate(small_car_model, tasks, use_decomposition=True, n_candidates=8, seed=2)
    without = evaluate(small_car_model, tasks, use_decomposition=False, n_candidates=8, seed=2)
    assert _outcome(with_caps.metrics) == _outcome(without.metrics)


def test_evaluation_records_trajectories(small_car_model):
    result = evaluate(small_car_model, _quick_tasks(1), n_candidates=8, record=True)
    assert len(result.records) == 3 * result.episodes[0].steps
    assert {r['episode'] for r in result.records} == {0}


def test_evaluation_rejects_foreign_tasks(small_car_model):
    with pytest.raises(ContractError):
        evaluate(small_car_model, [TaskSpec(EnvKind.DRONE)])
    with pytest.raises(ContractError):
        evaluate(small_car_model, [])


def test_density_sweep_rows(small_car_model):
    frame = density_sweep(small_car_model, TaskSpec(EnvKind.CAR, map_size=3.0, horizon=3), [2, 3], [0, 1],
                          n_candidates=8)
    assert len(frame) == 4
    assert list(frame[['agents', 'obstacles']].itertuples(index=False, name=None)) == [(2, 0), (2, 1), (3, 0), (3, 1)]
    assert {'safety_rate', 'mean_reward', 'success_rate'} <= set(frame.columns)


def test_chasing_game(small_car_model):
    metrics = run_chasing(small_car_model, TaskSpec(EnvKind.CAR, n_agents=3, horizon=3), n_tasks=2, n_candidates=8)
    assert isinstance(metrics, Metrics)
    assert metrics.task_count == 2
    assert metrics.mean_reward >= 0.0


def test_chasing_needs_two_agents(small_car_model):
    with pytest.raises(ContractError):
        run_chasing(small_car_model, TaskSpec(EnvKind.CAR, n_agents=1))


def test_decision_timing(small_car_model):
    report = decision_timing(small_car_model, _quick_tasks(1), n_candidates=8)
    assert report.samples > 0
    assert report.mean_ms > 0.0
    assert report.p95_ms > 0.0


# --- invariance -------------------------------------------------------------

@pytest.mark.parametrize('scores, region', [
    ([0.0, 1.0], Region.ADMISSIBLE),
    ([-0.1, 1.0], Region.BOUNDARY),
    ([-0.1, -2.0], Region.INADMISSIBLE),
])
def test_classify_state(scores, region):
    assert classify_state(np.array(scores)) is region


def test_invariance_analysis_flags_boundary_then_inadmissible(rng):
    trajectory = [np.array([float(k)]) for k in (0, 1, 2, 1, 1, 0)]
    report = invariance_analysis(LevelScorer(), [trajectory], 50, rng, BOX)
    regions = [c.region for c in report.classes[0]]
    assert regions == [Region.ADMISSIBLE, Region.BOUNDARY, Region.INADMISSIBLE,
                       Region.BOUNDARY, Region.BOUNDARY, Region.ADMISSIBLE]
    assert [c.violation for c in report.classes[0]] == [False, True, False, False, False, False]
    assert report.fractions['admissible'] == pytest.approx(2 / 6)
    assert report.fractions['boundary'] == pytest.approx(3 / 6)
    assert report.fractions['inadmissible'] == pytest.approx(1 / 6)
    assert report.fractions['violation'] == pytest.approx(1 / 6)
    assert report.fractions['boundary_violation'] == pytest.approx(1 / 3)
    assert report.fractions['states'] == 6.0


class ConstantScorer:
    def __init__(self, value):
        self.value = value

    def score(self, observation, actions):
        return np.full(len(actions), self.value)


@pytest.mark.parametrize('value, region, share', [
    (1.0, Region.ADMISSIBLE, 'admissible'),
    (-1.0, Region.INADMISSIBLE, 'inadmissible'),
])
def test_invariance_analysis_with_constant_scores(rng, value, region, share):
    trajectories = [[np.array([float(k)]) for k in range(5)], [np.array([0.0])] * 3]
    report = invariance_analysis(ConstantScorer(value), trajectories, 20, rng, BOX)
    assert all(c.region is region for row in report.classes for c in row)
    assert not any(c.violation for row in report.classes for c in row)
    assert report.fractions[share] == 1.0
    assert report.fractions['boundary'] == 0.0
    assert report.fractions['violation'] == 0.0
    assert report.fractions['boundary_violation'] == 0.0
    assert report.fractions['states'] == 8.0


def test_invariance_analysis_of_nothing(rng):
    report = invariance_analysis(LevelScorer(), [], 5, rng, BOX)
    assert report.fractions['states'] == 0.0
    with pytest.raises(ContractError):
        invariance_analysis(LevelScorer(), [], 0, rng, BOX)


def test_visited_states_appends_final_successor():
    chain = [
        Transition(np.array([float(k)]), np.zeros(1), Label.ADMISSIBLE, np.array([float(k + 1)]))
        for k in range(3)
    ]

    class Episode:
        transitions = [chain, []]

    sequences = visited_states(Episode())
    assert len(sequences) == 1
    assert [int(s[0]) for s in sequences[0]] == [0, 1, 2, 3]


# --- landscapes and writers -------------------------------------------------

def test_landscape_grid(integrator_model):
    box = (PROFILES[EnvKind.INTEGRATOR].low, PROFILES[EnvKind.INTEGRATOR].high)
    frame = export_landscape(integrator_model, np.array([0.0, -1.7]), (0, 1), 5, box)
    assert list(frame.columns) == ['a_i', 'a_j', 'phi']
    assert len(frame) == 25
    assert sorted(set(frame['a_i'])) == [-1.0, -0.5, 0.0, 0.5, 1.0]
    corner = frame[(frame['a_i'] == 1.0) & (frame['a_j'] == -1.0)]['phi'].item()
    assert corner == pytest.approx(integrator_model.score(np.array([0.0, -1.7]), np.array([[1.0, -1.0]]))[0])


def test_landscape_errors(integrator_model):
    box = (np.full(2, -1.0), np.ones(2))
    observation = np.array([0.0, -1.7])
    with pytest.raises(ContractError):
        export_landscape(integrator_model, observation, (0, 0), 5, box)
    with pytest.raises(ContractError):
        export_landscape(integrator_model, observation, (0, 1), 1, box)
    with pytest.raises(ContractError):
        export_landscape(LevelScorer(), np.array([0.0]), (0, 1), 5, BOX)


def test_metrics_table_drops_timing_by_default(tmp_path):
    rows = [Metrics(0.99, 3.5, 0.5, mean_decision_ms=1.2, max_decision_ms=3.0, task_count=2, seeds=(0, 1))]
    frame = pd.read_csv(write_metrics_table(rows, tmp_path / 'metrics.csv'))
    assert not set(TIMING_COLUMNS) & set(frame.columns)
    assert frame['safety_rate'].item() == pytest.approx(0.99)
    timed = pd.read_csv(write_metrics_table(rows, tmp_path / 'timed.csv', include_timing=True))
    assert set(TIMING_COLUMNS) <= set(timed.columns)


def test_trajectory_and_landscape_writers(tmp_path):
    path = write_trajectories([{'t': 0, 'agent': 1}, {'t': 1, 'agent': 1}], tmp_path / 'out' / 'traj.jsonl')
    assert [json.loads(line)['t'] for line in path.read_text().splitlines()] == [0, 1]
    frame = pd.DataFrame({'a_i': [0.0], 'a_j': [1.0], 'phi': [-0.25]})
    assert pd.read_csv(write_landscape(frame, tmp_path / 'landscape.csv'))['phi'].item() == -0.25
