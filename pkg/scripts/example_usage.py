"""
Example usage of the CAM navigation package
"""
import logging

import numpy as np
import pandas as pd

from cam_navigation import (
    CamModel,
    EnvKind,
    SubgraphCaps,
    TaskSpec,
    TrainConfig,
    build_ego_graph,
    decompose,
    density_sweep,
    sample_task,
    score_with_decomposition,
    train,
)
from cam_navigation.evaluator import export_landscape
from cam_navigation.worlds import PROFILES, preferences

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def main():
    """Walk through sampling, scoring, decomposition, a short training run and a sweep"""

    # Example 1: Sample a crowded task and look at one agent's ego graph
    logger.info("Sampling a car task...")
    world = sample_task(TaskSpec(EnvKind.CAR, n_agents=12, n_obstacles=10, map_size=3.0, seed=4))
    graph = build_ego_graph(world, 0)
    print(f"\nAgent 0 sees {graph.n_agent_edges} agents and {graph.n_obstacle_edges} obstacles")

    # Example 2: Split the graph into pieces the model was trained on
    pieces = decompose(graph, SubgraphCaps(2, 9), np.random.default_rng(0))
    print(f"Decomposed into {len(pieces)} subgraph(s)")

    # Example 3: Score candidates with a fresh model and rank them by preference
    model = CamModel.initialize(EnvKind.CAR, hidden=32, layers=2, rng=np.random.default_rng(1))
    candidates = PROFILES[EnvKind.CAR].sample_actions(8, np.random.default_rng(2))
    phi = score_with_decomposition(model, graph, candidates, SubgraphCaps(2, 9), np.random.default_rng(3))
    scores = pd.DataFrame({
        'turn_rate': candidates[:, 0],
        'phi': phi,
        'omega': preferences(world, 0, candidates),
    })
    print("\nCandidate scores:")
    print(scores.sort_values('omega', ascending=False))

    # Example 4: Train briefly on a small task
    logger.info("Training a small model...")
    config = TrainConfig.for_env(
        EnvKind.CAR, episodes=20, n_candidates=64, horizon=32, grad_steps=20,
        batch_size=64, hidden=32, layers=2, n_agents=3, n_obstacles=2,
    )
    result = train(config)
    telemetry = pd.DataFrame([row for row in result.telemetry if row['kind'] == 'episode'])
    print("\nTraining telemetry (last 5 episodes):")
    print(telemetry[['episode', 'success_window', 'relabeled', 'admissible_ratio']].tail())

    # Example 5: Obstacle-density sweep with the trained model
    logger.info("Running a small density sweep...")
    sweep = density_sweep(result.model, TaskSpec(EnvKind.CAR, map_size=3.0, horizon=64),
                          agent_counts=[3], obstacle_counts=[0, 4, 8], n_tasks=2, n_candidates=64)
    print("\nDensity sweep:")
    print(sweep[['agents', 'obstacles', 'safety_rate', 'success_rate']])

    # Example 6: Admissibility landscape of a single-agent model
    logger.info("Exporting a landscape...")
    integrator = CamModel.initialize(EnvKind.INTEGRATOR, hidden=16, rng=np.random.default_rng(5))
    box = (PROFILES[EnvKind.INTEGRATOR].low, PROFILES[EnvKind.INTEGRATOR].high)
    landscape = export_landscape(integrator, np.array([0.0, -0.5]), (0, 1), 21, box)
    share = (landscape['phi'] >= 0).mean()
    print(f"\nLandscape: {len(landscape)} points, {share:.1%} scored admissible")


if __name__ == "__main__":
    main()
