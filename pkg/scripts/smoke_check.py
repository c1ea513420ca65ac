"""
Quick smoke check of the CAM pipeline: task sampling, gradients, a short
training run, greedy evaluation and the command line
"""
import sys
import logging
import tempfile
from pathlib import Path

import numpy as np

from cam_navigation import CamModel, EnvKind, TaskSpec, TrainConfig, evaluate, load_model, sample_task, train
from cam_navigation.cli import main as cli_main
from cam_navigation.diffcore import gradient_check
from cam_navigation.evaluator import seeded_tasks
from cam_navigation.trainer import cam_loss_terms, random_transitions
from cam_navigation.worlds import check_collisions

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def check_task_sampling():
    """Sampled worlds start collision-free"""
    try:
        logger.info("Sampling tasks...")
        for kind in (EnvKind.CAR, EnvKind.DYNAMIC_DUBINS, EnvKind.DRONE):
            world = sample_task(TaskSpec(kind, n_agents=8, n_obstacles=8, seed=1))
            if check_collisions(world).any():
                logger.error(f"✗ {kind.value} task starts in collision")
                return False
            logger.info(f"✓ {kind.value}: {world.n_agents} agents, {len(world.obstacles)} obstacles")
        return True
    except Exception as e:
        logger.error(f"✗ Task sampling failed: {e}")
        return False


def check_gradients():
    """Tape gradients of the loss agree with finite differences"""
    try:
        logger.info("Checking loss gradients...")
        rng = np.random.default_rng(0)
        model = CamModel.initialize(EnvKind.CAR, hidden=6, layers=1, rng=rng)
        batch = random_transitions(EnvKind.CAR, 8, rng)
        report = gradient_check(
            lambda: cam_loss_terms(model, batch, (0.0, 0.02, 0.01), 0.1).total, model.parameters()
        )
        logger.info(f"✓ Max relative error {report.max_relative_error:.2e} over {report.checked} coordinates")
        return report.passed
    except Exception as e:
        logger.error(f"✗ Gradient check failed: {e}")
        return False


def check_training_and_evaluation(workdir: Path):
    """A few episodes of training, a checkpoint round trip and a greedy evaluation"""
    try:
        logger.info("Training for a few episodes...")
        config = TrainConfig.for_env(
            EnvKind.CAR, episodes=4, n_candidates=32, horizon=16, update_every=2, grad_steps=5,
            batch_size=16, hidden=16, layers=1, validation_interval=1, validation_episodes=1,
        )
        result = train(config, checkpoint_dir=workdir / 'checkpoints')
        logger.info(f"✓ {len(result.telemetry)} episodes, {result.updates} update rounds")

        loaded = load_model(workdir / 'checkpoints' / 'final.npz')
        tasks = seeded_tasks(TaskSpec(EnvKind.CAR, n_agents=3, n_obstacles=2, horizon=16), 2)
        metrics = evaluate(loaded.model, tasks, n_candidates=32).metrics
        logger.info(f"✓ Safety {metrics.safety_rate:.3f}, reward {metrics.mean_reward:.2f}")
        return 0.0 <= metrics.safety_rate <= 1.0
    except Exception as e:
        logger.error(f"✗ Training or evaluation failed: {e}")
        return False


def check_command_line(workdir: Path):
    """The gradcheck command exits cleanly"""
    try:
        logger.info("Running the gradcheck command...")
        code = cli_main([
            'gradcheck', '--set', 'env=integrator', '--set', f'output.root={workdir}', '--draws', '2',
        ])
        return code == 0
    except Exception as e:
        logger.error(f"✗ Command line check failed: {e}")
        return False


def main():
    """Run all checks"""
    logger.info("Starting CAM smoke checks...")

    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        checks = [
            ("Task Sampling", check_task_sampling),
            ("Loss Gradients", check_gradients),
            ("Training and Evaluation", lambda: check_training_and_evaluation(workdir)),
            ("Command Line", lambda: check_command_line(workdir)),
        ]

        results = []
        for name, check in checks:
            logger.info(f"--- Running {name} ---")
            try:
                results.append((name, check()))
            except Exception as e:
                logger.error(f"Check {name} crashed: {e}")
                results.append((name, False))

    # Summary
    logger.info("=" * 50)
    logger.info("SMOKE CHECK SUMMARY")
    logger.info("=" * 50)

    passed = 0
    for name, result in results:
        logger.info(f"{name}: {'PASS' if result else 'FAIL'}")
        if result:
            passed += 1

    logger.info(f"Overall: {passed}/{len(results)} checks passed")
    if passed == len(results):
        logger.info("✓ All checks passed")
        return 0
    logger.error("✗ Some checks failed, see the log above")
    return 1


if __name__ == "__main__":
    sys.exit(main())
