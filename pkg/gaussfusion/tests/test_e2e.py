"""
End-to-End Tests for GaussFusion

This module runs the command-line tool in a subprocess exactly as a user
would: generate a dataset, train, evaluate, render and plan, then checks the
JSON documents, the files written and the exit codes.
"""

import json
import os
import subprocess
import sys
from pathlib import Path
from typing import Dict, List

import pytest

pytestmark = pytest.mark.e2e


class E2ETestConstants:
    """Constants used across E2E tests."""
    PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent
    SUBPROCESS_TIMEOUT = 300  # seconds
    SCENES = 2
    SEED = 3
    TRAIN_STEPS = 2
    EXIT_OK = 0
    EXIT_FAILURE = 1
    EXIT_CONFIG = 2
    EXIT_INPUT = 3


class E2ETestRunner:
    """Helper class for running the CLI in a subprocess."""

    @staticmethod
    def create_test_environment() -> Dict[str, str]:
        """
        Create a test environment with the package importable.

        Returns:
            Dictionary of environment variables for the test subprocess.
        """
        env = os.environ.copy()
        env['PYTHONPATH'] = str(E2ETestConstants.PROJECT_ROOT)
        env.pop('GAUSSFUSION_CONFIG', None)
        return env

    @staticmethod
    def run(args: List[str]) -> subprocess.CompletedProcess:
        """
        Execute ``python -m gaussfusion`` with ``args``.

        Args:
            args: Command and flags.

        Returns:
            CompletedProcess object with execution results.
        """
        return subprocess.run(
            [sys.executable, '-m', 'gaussfusion', *args],
            capture_output=True,
            text=True,
            env=E2ETestRunner.create_test_environment(),
            cwd=str(E2ETestConstants.PROJECT_ROOT),
            timeout=E2ETestConstants.SUBPROCESS_TIMEOUT,
        )

    @staticmethod
    def run_json(args: List[str]) -> dict:
        """
        Run a command that must succeed and parse its JSON document.

        Raises:
            AssertionError: If the command exits nonzero.
        """
        process = E2ETestRunner.run(args)
        assert process.returncode == E2ETestConstants.EXIT_OK, (
            f"{' '.join(args)} failed with return code {process.returncode}\n"
            f"STDERR: {process.stderr[-2000:]}\n"
            f"STDOUT: {process.stdout[-500:]}"
        )
        return json.loads(process.stdout)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset and trained run shared by the pipeline tests."""
    root = tmp_path_factory.mktemp('e2e')
    data = str(root / 'data')
    run = str(root / 'run')
    generated = E2ETestRunner.run_json(['gen-data', '--micro', '--out', data,
                                        '--count', str(E2ETestConstants.SCENES),
                                        '--seed', str(E2ETestConstants.SEED)])
    trained = E2ETestRunner.run_json(['train', '--micro', '--data', data, '--out', run,
                                      '--steps', str(E2ETestConstants.TRAIN_STEPS)])
    return {'root': root, 'data': data, 'run': run, 'generated': generated, 'trained': trained}


# ============================================================================
# Pipeline Tests
# ============================================================================

class TestPipeline:
    """Dataset generation through planning."""

    def test_gen_data(self, workspace) -> None:
        document = workspace['generated']
        assert document['command'] == 'gen-data'
        assert document['scenes'] == E2ETestConstants.SCENES
        index = json.loads(Path(document['index']).read_text())
        assert len(index['samples']) == E2ETestConstants.SCENES
        assert index['config']['raster.h'] == 8

    def test_gen_data_is_deterministic(self, workspace) -> None:
        again = str(workspace['root'] / 'again')
        E2ETestRunner.run_json(['gen-data', '--micro', '--out', again,
                                '--count', str(E2ETestConstants.SCENES), '--seed', str(E2ETestConstants.SEED)])
        for name in ('scene_00000.gfc', 'scene_00001.gfc'):
            first = Path(workspace['data'], name).read_bytes()
            assert first == Path(again, name).read_bytes()

    def test_train(self, workspace) -> None:
        document = workspace['trained']
        assert document['steps'] == E2ETestConstants.TRAIN_STEPS
        assert os.path.isfile(document['checkpoint'])
        assert os.path.isfile(os.path.join(workspace['run'], 'vocab.gfc'))
        assert set(document['last']) >= {'total', 'map_ce', 'traj_l1', 'lr', 'step'}

    def test_eval(self, workspace) -> None:
        args = ['eval', '--micro', '--data', workspace['data'],
                '--checkpoint', workspace['trained']['checkpoint']]
        report = E2ETestRunner.run_json(args)
        assert report['scenes'] == E2ETestConstants.SCENES
        assert len(report['iou']) == 5
        assert report['ade'] >= 0.0
        assert set(report['migration']) == {'before', 'after', 'ratio'}
        assert E2ETestRunner.run_json(args) == report

    def test_render_scene(self, workspace) -> None:
        out = str(workspace['root'] / 'render')
        document = E2ETestRunner.run_json(['render', '--micro', '--data', workspace['data'], '--index', '1',
                                           '--checkpoint', workspace['trained']['checkpoint'], '--out', out])
        assert document['shape'] == [8, 8, 5]
        assert Path(document['ppm']).read_bytes().startswith(b"P6\n8 8\n255\n")
        assert os.path.isfile(document['gt_ppm'])
        low, high = document['channel_sum_range']
        assert abs(low - 1.0) < 1e-9 and abs(high - 1.0) < 1e-9
        assert sum(document['class_pixels']) == 64

    def test_render_and_plan_from_gaussians(self, workspace) -> None:
        out = str(workspace['root'] / 'from_set')
        first = E2ETestRunner.run_json(['render', '--micro', '--data', workspace['data'], '--out', out])
        gaussians = first['gaussians']
        rendered = E2ETestRunner.run_json(['render', '--micro', '--gaussians', gaussians, '--out', out])
        assert rendered['source'] == 'scene_00000_gaussians'
        assert rendered['class_pixels'] == first['class_pixels']
        planned = E2ETestRunner.run_json(['plan', '--micro', '--gaussians', gaussians])
        assert len(planned['stages']) == 2
        assert len(planned['selected']) == 4

    def test_plan_scene(self, workspace) -> None:
        out = str(workspace['root'] / 'plan')
        document = E2ETestRunner.run_json(['plan', '--micro', '--data', workspace['data'],
                                           '--checkpoint', workspace['trained']['checkpoint'], '--out', out])
        assert os.path.isfile(document['svg'])
        assert os.path.isfile(os.path.join(out, 'scene_00000_plan.json'))
        assert 0 <= document['selected_index'] < 3
        assert document['fde'] >= 0.0
        assert len(document['gt']) == 4


# ============================================================================
# Tooling Tests
# ============================================================================

class TestTooling:
    """Gradient checks, benchmarks and help."""

    @pytest.mark.gradcheck
    def test_gradcheck_ops(self, tmp_path) -> None:
        out = str(tmp_path / 'grad.json')
        document = E2ETestRunner.run_json(['gradcheck', '--micro', '--suite', 'ops', '--out', out])
        assert document['passed'] is True
        assert json.loads(Path(out).read_text()) == document

    def test_bench(self) -> None:
        document = E2ETestRunner.run_json(['bench', '--micro', '--repeats', '1'])
        assert document['command'] == 'bench'
        assert document['speedup'] > 0

    def test_help_lists_config_keys(self) -> None:
        process = E2ETestRunner.run(['--help'])
        assert process.returncode == E2ETestConstants.EXIT_OK
        for key in ('gaussians.count=512', 'planner.anchors=20', 'raster.resolution=0.5'):
            assert key in process.stdout


# ============================================================================
# Error Handling Tests
# ============================================================================

class TestExitCodes:
    """Exit codes for bad configuration and bad input."""

    @pytest.mark.parametrize("override", ['gaussians.dim=7', 'no.such_key=1', 'raster.h=10', 'precision=float16'])
    def test_config_errors(self, override, tmp_path) -> None:
        process = E2ETestRunner.run(['gen-data', '--out', str(tmp_path / 'd'), '--set', override])
        assert process.returncode == E2ETestConstants.EXIT_CONFIG, process.stderr
        assert 'configuration error' in process.stderr

    def test_plan_needs_a_source(self) -> None:
        process = E2ETestRunner.run(['plan', '--micro'])
        assert process.returncode == E2ETestConstants.EXIT_CONFIG

    def test_missing_config_file(self, tmp_path) -> None:
        process = E2ETestRunner.run(['gen-data', '--out', str(tmp_path / 'd'),
                                     '--config', str(tmp_path / 'absent.env')])
        assert process.returncode == E2ETestConstants.EXIT_INPUT

    def test_missing_dataset(self, tmp_path) -> None:
        process = E2ETestRunner.run(['eval', '--micro', '--data', str(tmp_path / 'nowhere')])
        assert process.returncode == E2ETestConstants.EXIT_INPUT
        assert 'input error' in process.stderr

    def test_missing_checkpoint(self, workspace) -> None:
        process = E2ETestRunner.run(['eval', '--micro', '--data', workspace['data'],
                                     '--checkpoint', str(workspace['root'] / 'absent.gfc')])
        assert process.returncode == E2ETestConstants.EXIT_INPUT

    def test_scene_index_out_of_range(self, workspace) -> None:
        process = E2ETestRunner.run(['plan', '--micro', '--data', workspace['data'], '--index', '99'])
        assert process.returncode == E2ETestConstants.EXIT_INPUT

    def test_corrupt_checkpoint(self, workspace) -> None:
        broken = workspace['root'] / 'broken.gfc'
        blob = bytearray(Path(workspace['trained']['checkpoint']).read_bytes())
        blob[-1] ^= 0xFF
        broken.write_bytes(bytes(blob))
        process = E2ETestRunner.run(['eval', '--micro', '--data', workspace['data'], '--checkpoint', str(broken)])
        assert process.returncode == E2ETestConstants.EXIT_INPUT

    @pytest.mark.parametrize("override", ['gaussians.dim=16', 'gaussians.classes=3'])
    def test_plan_on_mismatched_gaussians(self, workspace, override) -> None:
        out = str(workspace['root'] / 'mismatch')
        stored = E2ETestRunner.run_json(['render', '--micro', '--data', workspace['data'], '--out', out])
        process = E2ETestRunner.run(['plan', '--micro', '--set', override, '--gaussians', stored['gaussians']])
        assert process.returncode == E2ETestConstants.EXIT_CONFIG, process.stderr
        assert override.split('=')[0] in process.stderr
