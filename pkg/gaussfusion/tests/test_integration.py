"""
Integration Tests for GaussFusion

This module verifies how the components work together:
- Gradients through backbone, encoder, renderer and planner
- Training, checkpointing and reloading
- Evaluation reports and Gaussian migration
- Renderer throughput
"""

import json
import os
import time
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from gaussfusion.agents.planner import load_vocabulary
from gaussfusion.agents.trainer import (
    CHECKPOINT_FILE,
    TRAIN_LOG_FILE,
    VOCAB_FILE,
    evaluate,
    evaluate_checkpoint,
    load_model,
    train,
)
from gaussfusion.core.config import Config
from gaussfusion.core.errors import ContractError, DatasetError
from gaussfusion.main_model import GaussianFusionModel, build_vocabulary, run_model
from gaussfusion.memory.checkpoint import save_checkpoint
from gaussfusion.render.renderer import RasterConfig, render_naive, render_tiled
from gaussfusion.scene.gaussians import SceneBounds, init_gaussians
from gaussfusion.tools.suites import bench, run_suites
from gaussfusion.tools.synth import SceneSettings, generate_scenes


class IntegrationTestConstants:
    """Constants used across integration tests."""
    OVERFIT_LR = 5e-3
    OVERFIT_STEPS = 40
    HIGH_LR = 0.3
    WINDOW = 5
    CURVE_SCENES = 8
    CURVE_STEPS = 1500
    CURVE_WINDOW = 100
    DESK_STEPS = 3000
    MIN_FOREGROUND_MIOU = 0.6
    MAX_ADE = 0.5
    MIGRATION_SEEDS = 20
    MAX_MIGRATION_RATIO = 0.5
    BENCH_COUNT = 512
    BENCH_RASTER = 256
    MIN_SPEEDUP = 5.0


def window_means(losses):
    """Means of consecutive 100-step windows."""
    window = IntegrationTestConstants.CURVE_WINDOW
    return losses[:len(losses) // window * window].reshape(-1, window).mean(axis=1)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, micro_config, micro_scenes):
    """A short training run on the micro scenes with its output directory."""
    out_dir = str(tmp_path_factory.mktemp('run'))
    result = train(micro_config, micro_scenes, out_dir, steps=3)
    return result, out_dir


# ============================================================================
# Model Integration Tests
# ============================================================================

class TestModelForward:
    """Integration tests for the full forward pass."""

    def test_output_shapes(self, micro_config, micro_scene) -> None:
        output = run_model(micro_config, micro_scene)
        assert output.gaussians.count == 4
        assert output.bev_map.shape == (8, 8, micro_config['gaussians.classes'] + 1)
        np.testing.assert_allclose(output.bev_map.channel_sums(), 1.0, atol=1e-9)
        assert output.trajectories.trajectories.shape == (3, 4, 2)
        assert output.selected.shape == (4, 2)

    def test_keep_intermediate(self, micro_config, micro_scene) -> None:
        model = GaussianFusionModel(micro_config, build_vocabulary(micro_config, [micro_scene]))
        output = model.forward(micro_scene, keep_intermediate=True)
        assert len(output.history) == micro_config['encoder.blocks'] + 1
        np.testing.assert_array_equal(output.history[0].means.values, model.initial.means.values)
        assert output.history[-1] is output.gaussians

    def test_forward_is_deterministic(self, micro_config, micro_scene) -> None:
        vocab = build_vocabulary(micro_config, [micro_scene])
        a = GaussianFusionModel(micro_config, vocab).forward(micro_scene)
        b = GaussianFusionModel(micro_config, vocab).forward(micro_scene)
        np.testing.assert_array_equal(a.bev_map.numpy(), b.bev_map.numpy())
        np.testing.assert_array_equal(a.selected, b.selected)

    def test_loss_requires_map(self, micro_config, micro_scene) -> None:
        model = GaussianFusionModel(micro_config, build_vocabulary(micro_config, [micro_scene]))
        output = model.forward(micro_scene, with_map=False)
        with pytest.raises(ContractError):
            model.loss(micro_scene, output)

    def test_loss_record(self, micro_config, micro_scene) -> None:
        model = GaussianFusionModel(micro_config, build_vocabulary(micro_config, [micro_scene]))
        output = model.forward(micro_scene)
        record = model.loss(micro_scene, output).to_record(output.bev_map.underflow)
        assert set(record) == {'map_ce', 'map_lovasz', 'traj_l1', 'traj_cls', 'total', 'underflow'}
        assert record['total'] == pytest.approx(record['map_ce'] + record['map_lovasz']
                                                + record['traj_l1'] + record['traj_cls'])

    def test_ego_state_only_when_enabled(self, micro_config, micro_scene) -> None:
        vocab = build_vocabulary(micro_config, [micro_scene])
        config = micro_config.updated({'planner.ego_state': True})
        model = GaussianFusionModel(config, vocab)
        moved = replace(micro_scene, ego_state=micro_scene.ego_state + 1.0)
        a = model.forward(micro_scene, with_map=False).trajectories.scores.values
        b = model.forward(moved, with_map=False).trajectories.scores.values
        assert not np.allclose(a, b)

    def test_vocabulary_from_dataset(self, micro_config, micro_scenes) -> None:
        vocab = build_vocabulary(micro_config, micro_scenes)
        assert vocab.anchors.shape == (3, 4, 2)
        again = build_vocabulary(micro_config, micro_scenes)
        np.testing.assert_array_equal(vocab.anchors, again.anchors)


@pytest.mark.gradcheck
@pytest.mark.slow
class TestPipelineGradients:
    """Finite differences through the whole model at the micro configuration."""

    def test_encoder_and_planner_suites(self, micro_config) -> None:
        reports = run_suites(micro_config, ('encoder', 'planner'))
        assert [r.name for r in reports] == ['encoder', 'planner']
        for report in reports:
            assert report.passed, report.to_dict()


# ============================================================================
# Training Integration Tests
# ============================================================================

class TestTraining:
    """Integration tests for training and checkpoints."""

    def test_artifacts(self, trained_run) -> None:
        result, out_dir = trained_run
        assert result.checkpoint == os.path.join(out_dir, CHECKPOINT_FILE)
        assert os.path.isfile(result.checkpoint)
        with open(os.path.join(out_dir, TRAIN_LOG_FILE), encoding='utf-8') as fh:
            lines = [json.loads(line) for line in fh]
        assert [r['step'] for r in lines] == [0, 1, 2]
        assert all(np.isfinite(r['total']) for r in lines)
        vocab = load_vocabulary(os.path.join(out_dir, VOCAB_FILE))
        np.testing.assert_array_equal(vocab.anchors, result.model.vocab.anchors)

    def test_reload_is_deterministic(self, trained_run, micro_scenes) -> None:
        result, _ = trained_run
        reloaded = load_model(result.checkpoint)
        for sample in micro_scenes:
            a = result.model.forward(sample)
            b = reloaded.forward(sample)
            np.testing.assert_allclose(b.bev_map.numpy(), a.bev_map.numpy(), atol=1e-12)
            np.testing.assert_allclose(b.selected, a.selected, atol=1e-12)

    def test_evaluation_is_deterministic(self, trained_run, micro_scenes) -> None:
        result, _ = trained_run
        first, _ = evaluate_checkpoint(result.checkpoint, micro_scenes)
        second = evaluate(result.model, micro_scenes)
        assert first == second
        assert first['scenes'] == 3
        assert 0.0 <= first['miou'] <= 1.0
        assert first['migration']['before'] is not None

    def test_checkpoint_without_model_config(self, tmp_path, trained_run) -> None:
        result, _ = trained_run
        path = save_checkpoint(str(tmp_path / 'bare.gfc'), result.model.store)
        with pytest.raises(DatasetError):
            load_model(path)

    def test_needs_scenes(self, micro_config) -> None:
        with pytest.raises(ContractError):
            train(micro_config, [])

    def test_logs_start_and_end(self, micro_config, micro_scene) -> None:
        with patch('gaussfusion.agents.trainer.Observability') as MockObservability:
            train(micro_config, [micro_scene], steps=1)
        events = [c.args[0] for c in MockObservability.log.call_args_list]
        assert events == ['train_start', 'train_end']

    def test_overfits_one_scene(self, micro_config, micro_scene) -> None:
        config = micro_config.updated({'train.lr': IntegrationTestConstants.OVERFIT_LR})
        losses = train(config, [micro_scene], steps=IntegrationTestConstants.OVERFIT_STEPS).losses
        window = IntegrationTestConstants.WINDOW
        assert losses[-window:].mean() < losses[:window].mean()

    def test_initial_gaussians_stay_valid_without_encoder(self, micro_config, micro_scene) -> None:
        """Large steps on the initial set itself never produce an invalid Gaussian."""
        config = micro_config.updated({'encoder.blocks': 0, 'train.lr': IntegrationTestConstants.HIGH_LR})
        result = train(config, [micro_scene], steps=IntegrationTestConstants.OVERFIT_STEPS)
        assert np.all(np.isfinite(result.losses))
        initial = result.model.initial
        initial.check()
        assert np.all(initial.scales.values > 0)
        assert np.all((initial.priors.values > 0) & (initial.priors.values < 1))

    def test_initial_semantics_learnable_only_without_encoder(self, micro_config, micro_scene) -> None:
        vocab = build_vocabulary(micro_config, [micro_scene])
        with_blocks = GaussianFusionModel(micro_config, vocab)
        assert 'gaussians.logits' not in with_blocks.store
        assert 'gaussians.prior_params' not in with_blocks.store
        overlapping = {'encoder.blocks': 0, 'gaussians.count': 16, 'gaussians.init_scale': 4.0}
        bare = GaussianFusionModel(micro_config.updated(overlapping), vocab)
        output = bare.forward(micro_scene)
        bare.loss(micro_scene, output).total.backward()
        assert np.any(bare.store['gaussians.logits'].grad != 0)
        assert np.any(bare.store['gaussians.prior_params'].grad != 0)


@pytest.mark.slow
class TestLearningCurve:
    """Long-running training behaviour on a fixed micro dataset."""

    def test_moving_average_falls(self, micro_config) -> None:
        """Every 100-step average of the total loss is below the previous one over the first 1500 steps."""
        scenes = generate_scenes(0, IntegrationTestConstants.CURVE_SCENES, SceneBounds.from_config(micro_config),
                                 'normal', SceneSettings.from_config(micro_config))
        losses = train(micro_config, scenes, steps=IntegrationTestConstants.CURVE_STEPS).losses
        windows = window_means(losses[:IntegrationTestConstants.CURVE_STEPS])
        assert np.all(np.diff(windows) < 0), windows


@pytest.fixture(scope="module")
def desk_config():
    return Config.preset('desk')


@pytest.fixture(scope="module")
def desk_scenes(desk_config):
    return generate_scenes(0, IntegrationTestConstants.CURVE_SCENES, SceneBounds.from_config(desk_config),
                           'normal', SceneSettings.from_config(desk_config))


@pytest.fixture(scope="module")
def desk_run(desk_config, desk_scenes):
    """The desk preset overfit on eight scenes, with its evaluation on those scenes."""
    result = train(desk_config, desk_scenes, steps=IntegrationTestConstants.DESK_STEPS)
    return result, evaluate(result.model, desk_scenes)


@pytest.mark.slow
class TestDeskScaleLearning:
    """Overfitting eight synthetic scenes at the desk preset (P=128, d=64, two blocks)."""

    def test_moving_average_falls(self, desk_run) -> None:
        result, _ = desk_run
        windows = window_means(result.losses[:IntegrationTestConstants.CURVE_STEPS])
        assert np.all(np.diff(windows) < 0), windows

    def test_foreground_miou(self, desk_run) -> None:
        _, report = desk_run
        assert report['miou_fg'] >= IntegrationTestConstants.MIN_FOREGROUND_MIOU, report['iou']

    def test_trajectory_error(self, desk_run) -> None:
        _, report = desk_run
        assert report['ade'] <= IntegrationTestConstants.MAX_ADE

    def test_gaussians_migrate_toward_foreground(self, desk_config, desk_scenes, desk_run) -> None:
        """Median over seeds of the after/before distance-to-foreground ratio."""
        _, report = desk_run
        ratios = [report['migration']['ratio']]
        for seed in range(1, IntegrationTestConstants.MIGRATION_SEEDS):
            config = desk_config.updated({'seed': seed})
            model = train(config, desk_scenes, steps=IntegrationTestConstants.DESK_STEPS).model
            ratios.append(evaluate(model, desk_scenes)['migration']['ratio'])
        assert None not in ratios
        assert np.median(ratios) < IntegrationTestConstants.MAX_MIGRATION_RATIO, ratios


# ============================================================================
# Performance Tests
# ============================================================================

class TestBench:
    """Integration tests for the benchmark harness."""

    def test_report_fields(self, micro_config) -> None:
        report = bench(micro_config, repeats=1)
        assert report['gaussians'] == 4
        assert report['raster'] == [8, 8]
        assert report['speedup'] == pytest.approx(report['naive_seconds'] / report['tiled_seconds'])
        assert report['train_step_seconds'] > 0


@pytest.mark.performance
class TestRendererThroughput:
    """Tiled rasterization against the naive per-pixel loop."""

    def test_tiled_speedup(self) -> None:
        size = IntegrationTestConstants.BENCH_RASTER
        config = Config({'raster.h': size, 'raster.w': size, 'raster.resolution': 32.0 / size})
        bounds = SceneBounds.from_config(config)
        cfg = RasterConfig.from_config(config)
        rng = np.random.default_rng(0)
        gset = init_gaussians(IntegrationTestConstants.BENCH_COUNT, bounds, 4, 4, rng)
        gset = gset.replace(logits=rng.normal(size=(gset.count, 4)))

        def best(fn):
            times = []
            for _ in range(2):
                start = time.perf_counter()
                fn()
                times.append(time.perf_counter() - start)
            return min(times)

        naive = best(lambda: render_naive(gset, cfg))
        tiled = best(lambda: render_tiled(gset, cfg))
        assert naive / tiled >= IntegrationTestConstants.MIN_SPEEDUP
