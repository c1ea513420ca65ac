"""
Command-line entry points: train, eval, chase, gradcheck and landscape

Every command resolves a RunConfig (defaults < config file < --set overrides
< command flags), writes it to its run directory and puts its artifacts next
to it. Errors map to distinct exit codes.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .admissibility import CamModel
from .checkpoint import LoadedCheckpoint, architecture_hash, load_model
from .config import DEFAULTS, RunConfig
from .diffcore import gradient_check
from .evaluator import (
    density_sweep, evaluate, export_landscape, invariance_analysis, run_chasing, seeded_tasks,
    visited_states, write_landscape, write_metrics_table, write_trajectories,
)
from .exceptions import (
    CheckpointError, ConfigError, ContractError, DensityError, NumericError, ShapeError, TrainingDiverged,
)
from .models import Backbone
from .trainer import cam_loss_terms, random_transitions, train
from .worlds import observe, profile, sample_task

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

LOSS_TERMS = ('admissible', 'inadmissible', 'invariance', 'total')


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    """Translate command flags into dotted-key overrides so they land in the provenance"""
    mapping = {
        'agents': 'task.n_agents',
        'obstacles': 'task.n_obstacles',
        'map_size': 'task.map_size',
        'tasks': 'eval.n_tasks',
        'decomposition': 'eval.decomposition',
        'sweep_agents': 'eval.sweep_agents',
        'sweep_obstacles': 'eval.sweep_obstacles',
        'chunk_size': 'eval.chunk_size',
        'workers': 'eval.workers',
        'record': 'eval.record_trajectories',
        'dims': 'landscape.dims',
        'resolution': 'landscape.resolution',
        'agent': 'landscape.agent',
    }
    overrides = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return overrides


def _resolve(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None) -> RunConfig:
    return RunConfig.resolve(args.config, list(args.overrides) + _flag_overrides(args), base=base)


def checkpoint_defaults(loaded: LoadedCheckpoint) -> Dict[str, Any]:
    """Config layer that makes a checkpoint's architecture the default"""
    header = loaded.header
    return {
        'env': header['env'],
        'model': {
            'backbone': header['backbone'],
            'hidden': int(header['hidden']),
            'layers': int(header['layers']) or DEFAULTS['model']['layers'],
        },
    }


def _load_for_config(args: argparse.Namespace) -> Tuple[LoadedCheckpoint, RunConfig]:
    """
    Load --checkpoint and resolve the command's config on top of its architecture

    Raises:
        ContractError: The config names another environment, or another
            architecture without --force
    """
    loaded = load_model(args.checkpoint)
    config = _resolve(args, base=checkpoint_defaults(loaded))
    if config.env is not loaded.model.kind:
        raise ContractError(f"checkpoint was trained on {loaded.model.kind.value}, config asks for {config.env.value}")
    if architecture_hash(config.architecture()) != loaded.model_hash:
        if not args.force:
            raise ContractError(
                f"config model section {config.architecture()} does not match the checkpoint; pass --force to use it anyway"
            )
        logger.warning("config model section differs from the checkpoint; using the checkpoint weights (--force)")
    return loaded, config


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve(args)
    out = config.run_dir('train')
    config.write(out)
    train_config = config.train_config()
    logger.info(f"training {train_config.env.value} for {train_config.episodes} episode(s) into {out}")
    try:
        result = train(
            train_config,
            telemetry_path=out / 'telemetry.jsonl',
            checkpoint_dir=out / 'checkpoints',
            config_hash=config.hash,
        )
    except TrainingDiverged as e:
        logger.error(f"✗ training diverged; last checkpoint at {e.checkpoint_path}")
        raise
    logger.info(f"✓ finished after {result.updates} update round(s); checkpoint {out / 'checkpoints' / 'final.npz'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    loaded, config = _load_for_config(args)
    out = config.run_dir('eval')
    config.write(out)
    ev = config.data['eval']
    spec = config.task_spec()

    if ev['sweep_agents'] or ev['sweep_obstacles']:
        frame = density_sweep(
            loaded.model, spec,
            agent_counts=ev['sweep_agents'] or [spec.n_agents],
            obstacle_counts=ev['sweep_obstacles'] or [spec.n_obstacles],
            seed=int(ev['seed']), n_tasks=int(ev['n_tasks']),
            use_decomposition=bool(ev['decomposition']), caps=config.caps(),
            n_candidates=int(ev['n_candidates']), workers=int(ev['workers']),
        )
        write_metrics_table(frame, out / 'sweep.csv')
        logger.info(f"✓ wrote {len(frame)} sweep row(s) to {out / 'sweep.csv'}")
        return EXIT_OK

    tasks = seeded_tasks(spec, int(ev['n_tasks']))
    result = evaluate(
        loaded.model, tasks,
        use_decomposition=bool(ev['decomposition']), caps=config.caps(), seed=int(ev['seed']),
        n_candidates=int(ev['n_candidates']), chunk_size=ev['chunk_size'],
        record=bool(ev['record_trajectories']), keep_transitions=bool(args.invariance),
        workers=int(ev['workers']), thrust_offset=float(ev['thrust_offset']),
    )
    write_metrics_table([result.metrics], out / 'metrics.csv')
    timing = {'mean_ms': result.metrics.mean_decision_ms, 'max_ms': result.metrics.max_decision_ms}
    (out / 'timing.json').write_text(json.dumps(timing, sort_keys=True) + '\n')
    if ev['record_trajectories']:
        write_trajectories(result.records, out / 'trajectories.jsonl')
    if args.invariance:
        prof = profile(config.env)
        trajectories = [seq for episode in result.episodes for seq in visited_states(episode)]
        report = invariance_analysis(
            loaded.model, trajectories, int(ev['n_probe']),
            np.random.default_rng(int(ev['seed'])), (prof.low, prof.high),
        )
        (out / 'invariance.json').write_text(json.dumps(report.fractions, sort_keys=True, indent=2) + '\n')
        logger.info(f"invariance: {report.fractions}")

    m = result.metrics
    logger.info(f"✓ safety {m.safety_rate:.4f}, reward {m.mean_reward:.3f}, success {m.success_rate:.3f}")
    return EXIT_OK


def cmd_chase(args: argparse.Namespace) -> int:
    loaded, config = _load_for_config(args)
    out = config.run_dir('chase')
    config.write(out)
    ev = config.data['eval']
    metrics = run_chasing(
        loaded.model, config.task_spec(), seed=int(ev['seed']), n_tasks=int(ev['n_tasks']),
        use_decomposition=bool(ev['decomposition']), caps=config.caps(),
        n_candidates=int(ev['n_candidates']), workers=int(ev['workers']),
    )
    write_metrics_table([metrics], out / 'metrics.csv')
    logger.info(f"✓ chasing: safety {metrics.safety_rate:.4f}, reward {metrics.mean_reward:.3f}")
    return EXIT_OK


def run_gradcheck(config: RunConfig, draws: int, batch_size: int, hidden: int, layers: int,
                  tolerance: float = 1e-5, corrupt: float = 0.0) -> List[Dict[str, Any]]:
    """
    Finite-difference check of every CAM loss term over random models and batches

    Returns:
        One row per (draw, term) with the max relative error and pass flag
    """
    if draws < 1 or batch_size < 2:
        raise ContractError(f"gradcheck needs draws >= 1 and batch >= 2, got {draws} and {batch_size}")
    train_config = config.train_config()
    backbone = Backbone(config.data['model']['backbone']) if config.data['model'].get('backbone') else None
    rows = []
    for draw, seq in enumerate(np.random.SeedSequence(config.seed).spawn(draws)):
        rng = np.random.default_rng(seq)
        model = CamModel.initialize(config.env, backbone, hidden=hidden, layers=layers, rng=rng)
        batch = random_transitions(config.env, batch_size, rng)

        for term in LOSS_TERMS:
            def loss_fn(term: str = term):
                terms = cam_loss_terms(model, batch, train_config.margins, train_config.lam)
                return terms.total if term == 'total' else getattr(terms, term)

            report = gradient_check(loss_fn, model.parameters(), tolerance=tolerance, corrupt=corrupt)
            rows.append({
                'draw': draw,
                'term': term,
                'max_relative_error': report.max_relative_error,
                'checked': report.checked,
                'skipped_kinks': report.skipped_kinks,
                'passed': report.passed,
            })
        logger.debug(f"draw {draw}: worst {max(r['max_relative_error'] for r in rows[-len(LOSS_TERMS):]):.3e}")
    return rows


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _resolve(args)
    out = config.run_dir('gradcheck')
    config.write(out)
    rows = run_gradcheck(config, args.draws, args.batch, args.hidden, args.layers,
                         tolerance=args.tolerance, corrupt=args.corrupt)
    with open(out / 'gradcheck.jsonl', 'w') as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + '\n')

    for term in LOSS_TERMS:
        worst = max(r['max_relative_error'] for r in rows if r['term'] == term)
        status = '✓' if worst < args.tolerance else '✗'
        logger.info(f"{status} {term}: max relative error {worst:.3e}")
    failed = [r for r in rows if not r['passed']]
    if failed:
        logger.error(f"✗ gradient check failed on {len(failed)} of {len(rows)} (draw, term) pairs")
        return EXIT_NUMERIC
    logger.info(f"✓ gradient check passed over {args.draws} draw(s)")
    return EXIT_OK


def cmd_landscape(args: argparse.Namespace) -> int:
    loaded, config = _load_for_config(args)
    out = config.run_dir('landscape')
    config.write(out)
    land = config.data['landscape']
    world = sample_task(config.task_spec())
    agent = int(land['agent'])
    if not 0 <= agent < world.n_agents:
        raise ContractError(f"landscape agent {agent} is not in a task with {world.n_agents} agent(s)")
    prof = profile(config.env)
    frame = export_landscape(
        loaded.model, observe(world, agent), tuple(land['dims']), int(land['resolution']),
        (prof.low, prof.high), fixed_values=land.get('fixed_values'),
    )
    write_landscape(frame, out / 'landscape.csv')
    logger.info(f"✓ wrote {len(frame)} landscape point(s) to {out / 'landscape.csv'}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    'train': cmd_train,
    'eval': cmd_eval,
    'chase': cmd_chase,
    'gradcheck': cmd_gradcheck,
    'landscape': cmd_landscape,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='JSON config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Dotted-key override, e.g. train.episodes=10 (repeatable)')
    common.add_argument('--verbose', action='store_true', help='Log at DEBUG level')

    parser = argparse.ArgumentParser(prog='cam_navigation',
                                     description='Train and deploy control admissibility models.')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('train', parents=[common], help='Train a CAM online')

    def task_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument('--checkpoint', type=Path, required=True, help='Trained model (.npz)')
        p.add_argument('--force', action='store_true', help='Accept a config whose model section differs')
        p.add_argument('--agents', type=int, default=None)
        p.add_argument('--obstacles', type=int, default=None)
        p.add_argument('--map-size', type=float, default=None)

    ev = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint on seeded tasks')
    task_flags(ev)
    ev.add_argument('--tasks', type=int, default=None, help='Number of seeded tasks')
    ev.add_argument('--decomposition', action=argparse.BooleanOptionalAction, default=None,
                    help='Min-compose scores over decomposed subgraphs')
    ev.add_argument('--sweep-agents', type=int, nargs='+', default=None)
    ev.add_argument('--sweep-obstacles', type=int, nargs='+', default=None)
    ev.add_argument('--chunk-size', type=int, default=None, help='Adaptive early-exit chunk size')
    ev.add_argument('--workers', type=int, default=None, help='Parallel episodes')
    ev.add_argument('--record', action='store_true', default=None, help='Write trajectory records')
    ev.add_argument('--invariance', action='store_true', help='Classify visited states and write invariance.json')

    chase = sub.add_parser('chase', parents=[common], help='Zero-shot chasing game')
    task_flags(chase)
    chase.add_argument('--tasks', type=int, default=None)
    chase.add_argument('--decomposition', action=argparse.BooleanOptionalAction, default=None)
    chase.add_argument('--workers', type=int, default=None)

    grad = sub.add_parser('gradcheck', parents=[common], help='Finite-difference check of the loss gradients')
    grad.add_argument('--draws', type=int, default=100, help='Random parameter draws')
    grad.add_argument('--batch', type=int, default=8, help='Transitions per draw')
    grad.add_argument('--hidden', type=int, default=6, help='Hidden width of the checked models')
    grad.add_argument('--layers', type=int, default=1, help='Message-passing rounds of the checked models')
    grad.add_argument('--tolerance', type=float, default=1e-5)
    grad.add_argument('--corrupt', type=float, default=0.0,
                      help='Perturb the analytic gradients by this relative amount (negative control)')

    land = sub.add_parser('landscape', parents=[common], help='Export φ over a grid of two action dimensions')
    task_flags(land)
    land.add_argument('--dims', type=int, nargs=2, default=None)
    land.add_argument('--resolution', type=int, default=None)
    land.add_argument('--agent', type=int, default=None, help='Ego agent of the probed state')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"✗ invalid configuration ({len(e.problems)} problem(s))")
        for problem in e.problems:
            logger.error(f"  - {problem}")
        return EXIT_CONFIG
    except CheckpointError as e:
        logger.error(f"✗ {e}")
        return EXIT_CHECKPOINT
    except (ContractError, ShapeError, DensityError) as e:
        logger.error(f"✗ {e}")
        return EXIT_CONTRACT
    except NumericError as e:
        logger.error(f"✗ numeric failure: {e}")
        return EXIT_NUMERIC
    except Exception as e:
        logger.exception(f"✗ unexpected error: {e}")
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(main())
