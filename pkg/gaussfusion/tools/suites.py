"""Finite-difference gradient suites and timing benchmarks run by the CLI."""
import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from gaussfusion.agents.planner import trajectory_loss
from gaussfusion.core.config import Config
from gaussfusion.core.gradcheck import GradcheckReport, gradcheck
from gaussfusion.core.ops import bilinear_sample, conv2d, layer_norm, log_softmax, mlp_forward, softmax
from gaussfusion.core.tensor import parameter
from gaussfusion.main_model import GaussianFusionModel, build_vocabulary
from gaussfusion.render.losses import map_loss
from gaussfusion.render.renderer import RasterConfig, render, render_naive, render_tiled
from gaussfusion.scene.gaussians import GaussianSet, SceneBounds, init_gaussians
from gaussfusion.tools.synth import SceneSettings, generate_scene

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-5
PIPELINE_TOLERANCE = 1e-4
OP_SEEDS = 10
SUITE_NAMES = ('ops', 'renderer', 'encoder', 'planner')


def op_suite(seeds: int = OP_SEEDS) -> List[GradcheckReport]:
    """Every differentiable primitive against central differences on ``seeds`` random draws."""
    reports = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        a = parameter(rng.normal(size=(5, 7)))
        b = parameter(rng.normal(size=(7, 3)))
        reports.append(gradcheck(lambda: (a @ b).sum(), {'a': a, 'b': b}, tolerance=OP_TOLERANCE,
                                 name=f'matmul/{seed}'))

        x = parameter(rng.normal(size=(4, 6)))
        direction = rng.normal(size=(4, 6))
        reports.append(gradcheck(lambda: (softmax(x, axis=1) * direction).sum(), {'x': x},
                                 tolerance=OP_TOLERANCE, name=f'softmax/{seed}'))
        reports.append(gradcheck(lambda: (log_softmax(x, axis=1) * direction).sum(), {'x': x},
                                 tolerance=OP_TOLERANCE, name=f'log_softmax/{seed}'))

        gain = parameter(rng.normal(size=6))
        bias = parameter(rng.normal(size=6))
        reports.append(gradcheck(lambda: (layer_norm(x, gain, bias) * direction).sum(),
                                 {'x': x, 'gain': gain, 'bias': bias}, tolerance=OP_TOLERANCE,
                                 name=f'layer_norm/{seed}'))

        layers = [(parameter(rng.normal(size=(6, 5))), parameter(rng.normal(size=5)), 'relu'),
                  (parameter(rng.normal(size=(5, 2))), parameter(rng.normal(size=2)), 'identity')]
        named = {f'{kind}{i}': p for i, (w, bb, _) in enumerate(layers) for kind, p in (('w', w), ('b', bb))}
        reports.append(gradcheck(lambda: mlp_forward(x, layers).sum(), named, tolerance=OP_TOLERANCE,
                                 name=f'mlp/{seed}'))

        feat = parameter(rng.normal(size=(3, 5, 6)))
        pts = parameter(rng.uniform([0.1, 0.1], [3.9, 4.9], size=(7, 2)))
        weights = rng.normal(size=(7, 3))
        reports.append(gradcheck(lambda: (bilinear_sample(feat, pts) * weights).sum(),
                                 {'feat': feat, 'pts': pts}, tolerance=OP_TOLERANCE,
                                 name=f'bilinear_sample/{seed}'))

        img = parameter(rng.normal(size=(2, 6, 7)))
        kernel = parameter(rng.normal(size=(3, 2, 3, 3)))
        kb = parameter(rng.normal(size=3))
        reports.append(gradcheck(lambda: (conv2d(img, kernel, kb, stride=2, padding=1) ** 2).sum(),
                                 {'x': img, 'w': kernel, 'b': kb}, tolerance=OP_TOLERANCE,
                                 name=f'conv2d/{seed}'))

        u = parameter(rng.normal(size=(3, 4)))
        reports.append(gradcheck(
            lambda: (u.exp() + u.tanh() * u.sigmoid() + u.softplus() + u.sin() * u.cos()
                     + (u * u + 1.0).sqrt().log()).sum(),
            {'u': u}, tolerance=OP_TOLERANCE, name=f'elementwise/{seed}'))
    return reports


def random_scene(rng: np.random.Generator, count: int, classes: int, bounds: SceneBounds) -> Dict[str, object]:
    """Raw Gaussian parameters whose transforms give a valid set: softplus scales, sigmoid priors."""
    low, high = bounds.low + 2.0, bounds.high - 2.0
    return {
        'means': parameter(rng.uniform(low, high, size=(count, 2))),
        'scale_raw': parameter(rng.uniform(0.3, 1.5, size=(count, 2))),
        'rot_raw': parameter(rng.normal(size=(count, 2)) + np.array([2.0, 0.0])),
        'logits': parameter(rng.normal(size=(count, classes))),
        'prior_raw': parameter(rng.normal(size=count)),
    }


def scene_set(raw: Dict[str, object], dim: int = 4) -> GaussianSet:
    count = raw['means'].shape[0]
    return GaussianSet(raw['means'], raw['scale_raw'].softplus(), raw['rot_raw'], raw['logits'],
                       raw['prior_raw'].sigmoid(), np.zeros((count, dim)), np.zeros((count, dim)))


def renderer_suite(seeds: Sequence[int] = (0, 1, 2), count: int = 6, classes: int = 3) -> List[GradcheckReport]:
    """map_loss of the unculled render w.r.t. every Gaussian field on a 16x16 raster."""
    bounds = SceneBounds(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0)
    cfg = RasterConfig.from_bounds(bounds, 16, 16)
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        raw = random_scene(rng, count, classes, bounds)
        gt = rng.integers(0, classes + 1, size=(16, 16))
        reports.append(gradcheck(lambda: map_loss(render(scene_set(raw), cfg, cull=False), gt).total, raw,
                                 tolerance=PIPELINE_TOLERANCE, name=f'renderer/{seed}'))
    return reports


def _scene_model(config: Config):
    settings = SceneSettings.from_config(config)
    sample = generate_scene(np.random.default_rng(config['seed']), SceneBounds.from_config(config),
                            config['data.difficulty'], settings)
    model = GaussianFusionModel(config, build_vocabulary(config, [sample]))
    return model, sample


def encoder_suite(config: Config, max_entries: int = 3) -> List[GradcheckReport]:
    """map_loss o render o run_encoder w.r.t. every model parameter at the given (micro) config."""
    model, sample = _scene_model(config)

    def f():
        out = model.forward(sample, cull=False)
        return map_loss(out.bev_map, sample.gt_map, config['loss.lovasz_weight']).total

    return [gradcheck(f, dict(model.store.items()), tolerance=PIPELINE_TOLERANCE, max_entries=max_entries,
                      seed=config['seed'], name='encoder')]


def planner_suite(config: Config, max_entries: int = 3) -> List[GradcheckReport]:
    """trajectory_loss w.r.t. encoder and planner parameters, reaching both feature branches."""
    model, sample = _scene_model(config)

    def f():
        out = model.forward(sample, with_map=False)
        return trajectory_loss(out.trajectories, sample.gt_traj, config['loss.trajectory']).total

    params = {k: p for k, p in model.store.items() if k.startswith(('encoder.', 'planner.', 'gaussians.f_'))}
    return [gradcheck(f, params, tolerance=PIPELINE_TOLERANCE, max_entries=max_entries,
                      seed=config['seed'], name='planner')]


def run_suites(config: Config, names: Optional[Sequence[str]] = None) -> List[GradcheckReport]:
    runners: Dict[str, Callable[[], List[GradcheckReport]]] = {
        'ops': op_suite,
        'renderer': renderer_suite,
        'encoder': lambda: encoder_suite(config),
        'planner': lambda: planner_suite(config),
    }
    reports = []
    for name in names or SUITE_NAMES:
        reports.extend(runners[name]())
    return reports


def _best_of(fn: Callable[[], object], repeats: int) -> float:
    best = float('inf')
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench(config: Config, repeats: int = 3, threads: int = 1) -> dict:
    """Tiled vs naive render time on the configured raster, and encoder step latency."""
    rng = np.random.default_rng(config['seed'])
    bounds = SceneBounds.from_config(config)
    cfg = RasterConfig.from_config(config)
    init = init_gaussians(config['gaussians.count'], bounds, config['gaussians.classes'], config['gaussians.dim'],
                          rng, config['gaussians.init_scale'])
    gset = init.replace(logits=rng.normal(size=(init.count, init.classes)))
    naive = _best_of(lambda: render_naive(gset, cfg, threads=threads), repeats)
    tiled = _best_of(lambda: render_tiled(gset, cfg, threads=threads), repeats)

    model, sample = _scene_model(config)

    def step():
        model.store.zero_grad()
        out = model.forward(sample)
        model.loss(sample, out).total.backward()

    encoder = _best_of(step, repeats)
    pixels = cfg.h * cfg.w
    return {
        'gaussians': init.count,
        'raster': [cfg.h, cfg.w],
        'threads': threads,
        'naive_seconds': naive,
        'tiled_seconds': tiled,
        'naive_pixels_per_second': pixels / naive,
        'tiled_pixels_per_second': pixels / tiled,
        'speedup': naive / tiled,
        'train_step_seconds': encoder,
    }
