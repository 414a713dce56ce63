# gaussfusion/cli.py
"""Command-line entry point: ``python -m gaussfusion <command>``.

Every command prints one JSON document on stdout. Exit codes: 0 success,
1 runtime or gradient-check failure, 2 configuration error, 3 missing or
corrupt input files.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from gaussfusion.agents.evaluator import trajectory_errors
from gaussfusion.agents.planner import cascade_plan, load_vocabulary, select_trajectory
from gaussfusion.agents.trainer import evaluate, load_model, train
from gaussfusion.core.config import Config, describe_defaults
from gaussfusion.core.errors import ConfigError, DatasetError, GradientCheckError
from gaussfusion.core.observability import configure_logging, to_jsonable
from gaussfusion.core.tensor import set_default_dtype
from gaussfusion.main_model import GaussianFusionModel, build_vocabulary
from gaussfusion.memory.container import write_container
from gaussfusion.render.renderer import RasterConfig, render
from gaussfusion.scene.gaussians import SceneBounds, load_gaussians, save_gaussians
from gaussfusion.tools.dataset import align_config, data_keys, load_dataset, read_index, save_dataset
from gaussfusion.tools.export import write_overlay_svg, write_ppm
from gaussfusion.tools.suites import SUITE_NAMES, bench, run_suites
from gaussfusion.tools.synth import SceneSettings, generate_scenes

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3


def _emit(document: dict, out: Optional[str] = None) -> None:
    text = json.dumps(to_jsonable(document), indent=2, sort_keys=True)
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, 'w', encoding='utf-8') as fh:
            fh.write(text + '\n')
    print(text, flush=True)


def _config(args: argparse.Namespace) -> Config:
    overrides: List[str] = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    preset = 'micro' if args.micro else args.preset
    return Config.load(args.config, overrides, preset)


def _dataset(config: Config, directory: str):
    config = align_config(config, read_index(directory))
    samples, _ = load_dataset(directory)
    if not samples:
        raise DatasetError(f"dataset {directory} holds no scenes")
    return config, samples


def _scene(samples, index: int):
    if not 0 <= index < len(samples):
        raise DatasetError(f"scene index {index} out of range for {len(samples)} scenes")
    return samples[index]


def _model(config: Config, args: argparse.Namespace, samples) -> GaussianFusionModel:
    """Checkpointed model when given, otherwise a freshly initialized one."""
    if getattr(args, 'checkpoint', None):
        if not os.path.isfile(args.checkpoint):
            raise DatasetError(f"checkpoint not found: {args.checkpoint}")
        return load_model(args.checkpoint, {'threads': config['threads']})
    vocab_path = getattr(args, 'vocab', None)
    vocab = load_vocabulary(vocab_path) if vocab_path else build_vocabulary(config, samples)
    return GaussianFusionModel(config, vocab)


# ----------------------------------------------------------------- commands
def cmd_gen_data(config: Config, args: argparse.Namespace) -> int:
    count = args.count if args.count is not None else config['data.count']
    difficulty = args.difficulty or config['data.difficulty']
    bounds = SceneBounds.from_config(config)
    samples = generate_scenes(config['seed'], count, bounds, difficulty, SceneSettings.from_config(config),
                              threads=config['threads'])
    index = save_dataset(args.out, samples, bounds,
                         {'seed': config['seed'], 'difficulty': difficulty, 'config': data_keys(config)})
    _emit({'command': 'gen-data', 'index': index, 'scenes': count, 'difficulty': difficulty})
    return EXIT_OK


def cmd_train(config: Config, args: argparse.Namespace) -> int:
    config, samples = _dataset(config, args.data)
    vocab = load_vocabulary(args.vocab) if args.vocab else None
    result = train(config, samples, args.out, vocab=vocab, steps=args.steps)
    history = result.history
    _emit({
        'command': 'train',
        'checkpoint': result.checkpoint,
        'log': result.log_path,
        'steps': len(history),
        'first': history[0] if history else None,
        'last': history[-1] if history else None,
    })
    return EXIT_OK


def cmd_eval(config: Config, args: argparse.Namespace) -> int:
    config, samples = _dataset(config, args.data)
    model = _model(config, args, samples)
    report = evaluate(model, samples)
    report['command'] = 'eval'
    _emit(report, args.out)
    return EXIT_OK


def _source(config: Config, args: argparse.Namespace):
    """(config, stem, sample or None, explicit GaussianSet or None) for render and plan."""
    if args.gaussians:
        gset, bounds = load_gaussians(args.gaussians)
        config = config.updated({f'scene.{k}': v for k, v in bounds.to_dict().items()})
        return config, os.path.splitext(os.path.basename(args.gaussians))[0], None, gset
    if not args.data:
        raise ConfigError(f"{args.command} needs --data or --gaussians", 'data')
    config, samples = _dataset(config, args.data)
    return config, f"scene_{args.index:05d}", (samples, _scene(samples, args.index)), None


def _check_gaussians(gset, config: Config, path: str) -> None:
    """A stored set must match the widths and top-m of the model that plans over it."""
    for key, found in (('gaussians.classes', gset.classes), ('gaussians.dim', gset.dim)):
        if found != config[key]:
            raise ConfigError(f"{path} holds Gaussians with {key}={found}, the model expects {config[key]}", key)
    if config['planner.top_m'] > gset.count:
        raise ConfigError(f"{path} holds {gset.count} Gaussians, fewer than planner.top_m={config['planner.top_m']}",
                          'planner.top_m')


def cmd_render(config: Config, args: argparse.Namespace) -> int:
    config, stem, scene, gset = _source(config, args)
    sample = None
    if gset is None:
        samples, sample = scene
        output = _model(config, args, samples).forward(sample, with_map=True)
        bev, gset = output.bev_map, output.gaussians
    else:
        bev = render(gset, RasterConfig.from_config(config), threads=config['threads'])
    sums = bev.channel_sums()
    os.makedirs(args.out, exist_ok=True)
    document = {
        'command': 'render',
        'source': stem,
        'shape': list(bev.shape),
        'ppm': write_ppm(os.path.join(args.out, f"{stem}_map.ppm"), bev.argmax(), bev.channels),
        'probs': write_container(os.path.join(args.out, f"{stem}_probs.gfc"), {'probs': bev.numpy()},
                                 {'kind': 'semantic_bev', 'resolution': bev.resolution, 'origin': list(bev.origin)}),
        'underflow': bev.underflow,
        'channel_sum_range': [float(sums.min()), float(sums.max())],
        'class_pixels': np.bincount(bev.argmax().reshape(-1), minlength=bev.channels).tolist(),
    }
    if sample is not None:
        document['gt_ppm'] = write_ppm(os.path.join(args.out, f"{stem}_gt.ppm"), sample.gt_map, bev.channels)
        document['gaussians'] = save_gaussians(os.path.join(args.out, f"{stem}_gaussians.gfc"), gset.detach(),
                                               SceneBounds.from_config(config))
    _emit(document)
    return EXIT_OK


def cmd_plan(config: Config, args: argparse.Namespace) -> int:
    config, stem, scene, gset = _source(config, args)
    sample = None
    if gset is None:
        samples, sample = scene
        model = _model(config, args, samples)
        output = model.forward(sample, with_map=bool(args.out))
        final, gset = output.trajectories, output.gaussians
        class_map = output.bev_map.argmax() if output.bev_map is not None else None
    else:
        model = _model(config, args, ())
        _check_gaussians(gset, model.config, args.gaussians)
        final = cascade_plan(model.planner, gset)
        class_map = render(gset, model.raster, threads=config['threads']).argmax() if args.out else None
    scores = final.scores.values
    best = int(np.argmax(scores))
    document = {
        'command': 'plan',
        'source': stem,
        'stages': [stage.to_dict() for stage in final.stages],
        'selected_index': best,
        'selected': select_trajectory(final),
    }
    if sample is not None:
        document['gt'] = sample.gt_traj
        document.update(trajectory_errors(document['selected'], sample.gt_traj))
    if args.out:
        document['svg'] = write_overlay_svg(
            os.path.join(args.out, f"{stem}_plan.svg"), class_map, model.raster,
            final.trajectories.values, scores, best, None if sample is None else sample.gt_traj,
            gset.means.values, gset.scales.values, gset.rotations.values)
        _emit(document, os.path.join(args.out, f"{stem}_plan.json"))
    else:
        _emit(document)
    return EXIT_OK


def cmd_gradcheck(config: Config, args: argparse.Namespace) -> int:
    reports = run_suites(config, args.suite)
    passed = all(r.passed for r in reports)
    _emit({'command': 'gradcheck', 'passed': passed, 'suites': [r.to_dict() for r in reports]}, args.out)
    if not passed:
        failed = [r.name for r in reports if not r.passed]
        raise GradientCheckError(f"gradient suites failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_bench(config: Config, args: argparse.Namespace) -> int:
    result = bench(config, repeats=args.repeats, threads=config['threads'])
    result['command'] = 'bench'
    _emit(result, args.out)
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value config file (default: $GAUSSFUSION_CONFIG)')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='override one config key; repeatable')
    common.add_argument('--preset', help='start from a named preset: full, desk or micro')
    common.add_argument('--micro', action='store_true', help='shorthand for --preset micro')
    common.add_argument('--threads', type=int, help='worker threads for rendering and data generation')
    common.add_argument('--seed', type=int, help='global seed')

    parser = argparse.ArgumentParser(
        prog='gaussfusion',
        description='Gaussian-centric BEV fusion and cascade trajectory planning on synthetic scenes.',
        epilog='config keys and defaults:\n' + describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('gen-data', parents=[common], help='generate a synthetic dataset')
    p.add_argument('--out', required=True, help='dataset directory')
    p.add_argument('--count', type=int, help='number of scenes (default: data.count)')
    p.add_argument('--difficulty', choices=('empty', 'easy', 'normal', 'hard'))
    p.set_defaults(handler=cmd_gen_data)

    p = commands.add_parser('train', parents=[common], help='train on a dataset directory')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True, help='run directory for checkpoint, vocabulary and log')
    p.add_argument('--steps', type=int, help='iterations (default: train.epochs x scenes)')
    p.add_argument('--vocab', help='anchor vocabulary file to use instead of clustering')
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('eval', parents=[common], help='mIoU, ADE, FDE and Gaussian migration')
    p.add_argument('--data', required=True)
    p.add_argument('--checkpoint')
    p.add_argument('--vocab')
    p.add_argument('--out', help='also write the report to this JSON file')
    p.set_defaults(handler=cmd_eval)

    for name, handler, text in (('render', cmd_render, 'render the semantic BEV map of a scene or a GaussianSet'),
                                ('plan', cmd_plan, 'plan trajectories for a scene or a GaussianSet')):
        p = commands.add_parser(name, parents=[common], help=text)
        p.add_argument('--data', help='dataset directory')
        p.add_argument('--index', type=int, default=0, help='scene index in the dataset')
        p.add_argument('--gaussians', help='serialized GaussianSet to use instead of a dataset scene')
        p.add_argument('--checkpoint')
        p.add_argument('--vocab')
        p.add_argument('--out', required=name == 'render', help='output directory')
        p.set_defaults(handler=handler)

    p = commands.add_parser('gradcheck', parents=[common], help='finite-difference gradient suites')
    p.add_argument('--suite', action='append', choices=SUITE_NAMES, help='suite to run; repeatable (default: all)')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser('bench', parents=[common], help='tiled vs naive renderer timing')
    p.add_argument('--repeats', type=int, default=3)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config(args)
        configure_logging(config['log.level'])
        set_default_dtype(config['precision'])
        logger.debug("running %s with %s", args.command, config.overrides())
        return args.handler(config, args)
    except ConfigError as exc:
        logger.error(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        logger.error(f"input error: {exc}")
        return EXIT_INPUT
    except GradientCheckError as exc:
        logger.error(str(exc))
        return EXIT_FAILURE
    except Exception as exc:
        logger.error(f"Error during {args.command}: {exc}", exc_info=True)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
