"""
Smoke Tests for GaussFusion

Quick checks that the micro pipeline runs end to end:
- Scene generation
- Model forward pass, render and loss
- Container round trip
- Operator gradient check on one seed
"""

import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from gaussfusion.core.config import Config
from gaussfusion.main_model import GaussianFusionModel, build_vocabulary
from gaussfusion.memory.container import read_container, write_container
from gaussfusion.scene.gaussians import SceneBounds
from gaussfusion.tools.suites import op_suite
from gaussfusion.tools.synth import SceneSettings, generate_scene


class SmokeTestRunner:
    """Orchestrates smoke tests for the micro configuration."""

    def __init__(self) -> None:
        self.test_dir = Path(tempfile.gettempdir()) / 'gaussfusion_smoke_tests'
        self.test_dir.mkdir(exist_ok=True)
        self.results: list = []
        self.config = Config.preset('micro')
        self.sample = None

    def cleanup(self) -> None:
        if self.test_dir.exists():
            shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_scene_generation(self) -> None:
        print("\nTesting Scene Generation...")
        self.sample = generate_scene(np.random.default_rng(0), SceneBounds.from_config(self.config), 'normal',
                                     SceneSettings.from_config(self.config))
        assert self.sample.gt_map.shape == (8, 8), "ground truth map has the wrong shape"
        print(f'   Corridor: {self.sample.corridor.kind}, vehicles: {len(self.sample.vehicles)}')
        self.results.append(('Scene Generation', True))

    def test_model_forward(self) -> None:
        print("\nTesting Model Forward Pass...")
        if self.sample is None:
            raise RuntimeError("scene generation did not run")
        model = GaussianFusionModel(self.config, build_vocabulary(self.config, [self.sample]))
        output = model.forward(self.sample)
        losses = model.loss(self.sample, output)
        losses.total.backward()
        sums = output.bev_map.channel_sums()
        assert np.allclose(sums, 1.0), "class probabilities do not sum to one"
        assert np.isfinite(losses.total.item()), "loss is not finite"
        print(f'   Loss: {losses.total.item():.4f}, selected endpoint: {output.selected[-1].round(2).tolist()}')
        self.results.append(('Model Forward Pass', True))

    def test_container_round_trip(self) -> None:
        print("\nTesting Container Round Trip...")
        path = write_container(str(self.test_dir / 'smoke.gfc'), {'x': np.arange(6.0).reshape(2, 3)}, {'k': 1})
        arrays, meta = read_container(path)
        assert np.array_equal(arrays['x'], np.arange(6.0).reshape(2, 3)), "array changed on disk"
        assert meta == {'k': 1}, "metadata changed on disk"
        self.results.append(('Container Round Trip', True))

    def test_operator_gradients(self) -> None:
        print("\nTesting Operator Gradients...")
        reports = op_suite(seeds=1)
        failed = [r.name for r in reports if not r.passed]
        assert not failed, f"gradient checks failed: {failed}"
        print(f'   {len(reports)} operator checks passed')
        self.results.append(('Operator Gradients', True))

    def run_all_tests(self) -> int:
        print("=" * 70)
        print("Starting Smoke Tests for GaussFusion")
        print("=" * 70)

        tests = [
            self.test_scene_generation,
            self.test_model_forward,
            self.test_container_round_trip,
            self.test_operator_gradients,
        ]
        for test in tests:
            try:
                test()
            except Exception as e:
                test_name = test.__name__.replace('test_', '').replace('_', ' ').title()
                print(f'   {test_name} failed: {e}')
                self.results.append((test_name, False))

        passed = self.print_summary()
        self.cleanup()
        return 0 if passed else 1

    def print_summary(self) -> bool:
        print("\n" + "=" * 70)
        print("Smoke Test Summary")
        print("=" * 70)
        passed = sum(1 for _, result in self.results if result)
        total = len(self.results)
        for test_name, result in self.results:
            print(f"   {'PASS' if result else 'FAIL'}: {test_name}")
        print("-" * 70)
        print(f"   Total: {passed}/{total} tests passed")
        print("=" * 70)
        return passed == total


if __name__ == '__main__':
    sys.exit(SmokeTestRunner().run_all_tests())
