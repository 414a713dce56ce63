"""
Unit Tests for the Synthetic Harness

Tests for scene generation, dataset directories, the evaluator, image
exports and the toy backbone.
"""

import json
import logging
import math
import os

import numpy as np
import pytest

from gaussfusion.agents.evaluator import (
    Evaluator,
    confusion_matrix,
    foreground_distance,
    iou_per_class,
    metrics,
    migration,
    trajectory_errors,
)
from gaussfusion.core.config import Config
from gaussfusion.core.errors import ContractError, DatasetError, DimensionError
from gaussfusion.core.params import ParameterStore
from gaussfusion.memory.container import write_container
from gaussfusion.render.renderer import RasterConfig
from gaussfusion.scene.gaussians import SceneBounds
from gaussfusion.scene.sensors import CameraModel
from gaussfusion.tools.backbone import ToyBackbone, encode_features
from gaussfusion.tools.dataset import (
    INDEX_FILE,
    align_config,
    data_keys,
    dataset_trajectories,
    load_dataset,
    load_sample,
    read_index,
    save_dataset,
)
from gaussfusion.tools.export import CLASS_PALETTE, encode_ppm, write_overlay_svg, write_ppm
from gaussfusion.tools.synth import (
    BACKGROUND,
    DIFFICULTY_VEHICLES,
    DRIVABLE,
    EGO_PATH,
    HORIZON_SECONDS,
    LANE_LINE,
    LANE_WIDTH,
    SKY,
    SURFACE_COLORS,
    VEHICLE,
    Corridor,
    SceneSettings,
    Vehicle,
    ego_trajectory,
    generate_scene,
    generate_scenes,
    make_cameras,
    rasterize_polygons,
    render_camera,
    sample_corridor,
    sample_ego_trajectories,
    scene_polygons,
)


# ============================================================================
# Test Constants
# ============================================================================

class HarnessTestConstants:
    """Constants for harness tests."""
    QUARTER_METER_RASTER = 64
    EGO_REACH = 5.0
    CORRIDOR_REACH = 24.0
    PARKED = Vehicle(4.0, 3.5, 0.0)
    AHEAD = Vehicle(6.0, 0.0, 0.0)


def straight_corridor_oracle(centers, ego_reach, vehicles=()):
    """Class map of a straight corridor computed directly from pixel centers."""
    x, y = centers[..., 0], centers[..., 1]
    out = np.full(x.shape, BACKGROUND)
    out[np.abs(y) < 1.5 * LANE_WIDTH] = DRIVABLE
    for lateral in (0.5 * LANE_WIDTH, -0.5 * LANE_WIDTH):
        out[np.abs(y - lateral) < 0.15] = LANE_LINE
    out[(np.abs(y) < 1.0) & (x > 0.0) & (x < ego_reach)] = EGO_PATH
    for v in vehicles:
        inside = (np.abs(x - v.x) < 0.5 * v.length) & (np.abs(y - v.y) < 0.5 * v.width)
        out[inside] = VEHICLE
    return out


# ============================================================================
# Scene Generation Tests
# ============================================================================

class TestCorridor:
    """Test corridor geometry"""

    def test_straight_pose(self) -> None:
        xy, heading = Corridor('straight').pose([0.0, 2.0, 5.0])
        np.testing.assert_allclose(xy, [[0, 0], [2, 0], [5, 0]])
        np.testing.assert_allclose(heading, 0.0)

    def test_arc_stays_on_circle(self) -> None:
        corridor = Corridor('arc', 0.05, 0.0)
        xy, heading = corridor.pose(np.linspace(0.0, 20.0, 11))
        center = np.array([0.0, 1.0 / 0.05])
        np.testing.assert_allclose(np.linalg.norm(xy - center, axis=1), 20.0, atol=1e-9)
        np.testing.assert_allclose(heading, 0.05 * np.linspace(0.0, 20.0, 11))

    def test_turn_is_quarter_circle_then_straight(self) -> None:
        k = 0.1
        corridor = Corridor('turn', k, 3.0, 3.0 + 0.5 * math.pi / k)
        end = 3.0 + 0.5 * math.pi / k
        xy, heading = corridor.pose([end, end + 4.0])
        np.testing.assert_allclose(heading, 0.5 * math.pi)
        np.testing.assert_allclose(xy[0], [3.0 + 1.0 / k, 1.0 / k], atol=1e-9)
        np.testing.assert_allclose(xy[1], [3.0 + 1.0 / k, 1.0 / k + 4.0], atol=1e-9)

    def test_round_trip_dict(self) -> None:
        corridor = Corridor('turn', -0.08, 4.0, 20.0)
        assert Corridor.from_dict(corridor.to_dict()) == corridor
        assert Corridor.from_dict(Corridor('straight').to_dict()).turn_end == math.inf

    def test_unknown_kind(self) -> None:
        with pytest.raises(ContractError):
            sample_corridor(np.random.default_rng(0), 'roundabout')

    def test_ego_trajectory_constant_speed(self) -> None:
        traj = ego_trajectory(Corridor('straight'), 2.0, 8)
        step = 2.0 * HORIZON_SECONDS / 8
        np.testing.assert_allclose(traj[:, 0], step * np.arange(1, 9))
        np.testing.assert_allclose(traj[:, 1], 0.0)

    def test_sampled_trajectories_stay_in_bounds(self, small_bounds) -> None:
        trajs = sample_ego_trajectories(np.random.default_rng(3), 50, 6, small_bounds)
        assert trajs.shape == (50, 6, 2)
        assert np.all(np.abs(trajs) < 8.0)


class TestGroundTruthMap:
    """Test BEV ground truth rasterization"""

    @pytest.fixture
    def fine_raster(self, small_bounds):
        size = HarnessTestConstants.QUARTER_METER_RASTER
        return RasterConfig.from_bounds(small_bounds, size, size)

    def test_straight_corridor_matches_geometry(self, fine_raster) -> None:
        """Every pixel class agrees with the analytic layout of a straight road."""
        vehicles = [HarnessTestConstants.PARKED]
        polygons = scene_polygons(Corridor('straight'), vehicles, HarnessTestConstants.CORRIDOR_REACH,
                                  HarnessTestConstants.EGO_REACH)
        gt = rasterize_polygons(polygons, fine_raster)
        expected = straight_corridor_oracle(fine_raster.pixel_centers(), HarnessTestConstants.EGO_REACH,
                                            vehicles)
        np.testing.assert_array_equal(gt, expected)
        for cls in (BACKGROUND, DRIVABLE, LANE_LINE, VEHICLE, EGO_PATH):
            assert (gt == cls).sum() > 0

    def test_without_ego_path(self, fine_raster) -> None:
        polygons = scene_polygons(Corridor('straight'), (), HarnessTestConstants.CORRIDOR_REACH)
        assert not (rasterize_polygons(polygons, fine_raster) == EGO_PATH).any()

    def test_vehicle_footprint_rotation(self) -> None:
        corners = Vehicle(0.0, 0.0, 0.5 * math.pi, length=4.0, width=2.0).footprint()
        np.testing.assert_allclose(np.sort(np.abs(corners[:, 0])), [1, 1, 1, 1], atol=1e-12)
        np.testing.assert_allclose(np.sort(np.abs(corners[:, 1])), [2, 2, 2, 2], atol=1e-12)


class TestCameras:
    """Test camera placement and ray casting"""

    def test_cameras_spread_from_forward(self) -> None:
        cams = make_cameras(3, 8, 16)
        forward = np.array([[10.0, 0.0, 1.5]])
        rows, cols, depth = cams[0].project_numpy(forward)
        assert depth[0] > 0
        np.testing.assert_allclose([rows[0], cols[0]], [3.5, 7.5])
        assert cams[1].project_numpy(forward)[2][0] < 0

    def test_sky_and_ground(self) -> None:
        camera = CameraModel.looking(0.0, 8, 16)
        image = render_camera(camera, Corridor('straight'), (), HarnessTestConstants.CORRIDOR_REACH)
        assert image.shape == (3, 8, 16)
        np.testing.assert_allclose(image[:, 0, :], np.repeat(SURFACE_COLORS[SKY][:, None], 16, axis=1))
        np.testing.assert_allclose(image[:, 7, 8], SURFACE_COLORS[DRIVABLE])

    def test_vehicle_ahead_is_visible(self) -> None:
        camera = CameraModel.looking(0.0, 8, 16)
        image = render_camera(camera, Corridor('straight'), [HarnessTestConstants.AHEAD],
                              HarnessTestConstants.CORRIDOR_REACH)
        is_vehicle = np.all(np.isclose(image, SURFACE_COLORS[VEHICLE][:, None, None]), axis=0)
        assert is_vehicle[:, 8].any()
        assert not is_vehicle[0].any()


class TestGenerateScene:
    """Test whole-scene sampling"""

    def test_shapes(self, micro_scene, micro_config) -> None:
        assert micro_scene.gt_map.shape == (8, 8)
        assert micro_scene.gt_traj.shape == (4, 2)
        assert micro_scene.camera_rasters.shape == (2, 3, 8, 16)
        assert micro_scene.point_bev_raster.shape == (micro_config['backbone.bev_bins'], 8, 8)
        assert micro_scene.ego_state.shape == (2,)
        assert micro_scene.gt_map.min() >= 0 and micro_scene.gt_map.max() <= EGO_PATH

    def test_deterministic(self, micro_config) -> None:
        bounds = SceneBounds.from_config(micro_config)
        settings = SceneSettings.from_config(micro_config)
        a = generate_scene(np.random.default_rng(5), bounds, 'hard', settings)
        b = generate_scene(np.random.default_rng(5), bounds, 'hard', settings)
        for key, value in a.arrays().items():
            np.testing.assert_array_equal(value, b.arrays()[key])
        assert a.meta() == b.meta()

    @pytest.mark.parametrize("difficulty", sorted(DIFFICULTY_VEHICLES))
    def test_vehicle_counts(self, difficulty, micro_config) -> None:
        low, high = DIFFICULTY_VEHICLES[difficulty]
        scenes = generate_scenes(21, 4, SceneBounds.from_config(micro_config), difficulty,
                                 SceneSettings.from_config(micro_config))
        for scene in scenes:
            assert low <= len(scene.vehicles) <= high
            assert scene.difficulty == difficulty

    def test_vehicles_in_side_lanes(self, micro_config) -> None:
        scene = generate_scene(np.random.default_rng(9), SceneBounds.from_config(micro_config), 'hard',
                               SceneSettings.from_config(micro_config))
        corridor = scene.corridor
        s = np.linspace(-30.0, 30.0, 6001)
        for row in scene.vehicles:
            for lateral in (LANE_WIDTH, -LANE_WIDTH):
                gap = np.linalg.norm(corridor.offset(s, lateral) - row[:2], axis=1).min()
                if gap < 0.05:
                    break
            else:
                pytest.fail(f"vehicle at {row[:2]} is not centered in a side lane")

    def test_threads_do_not_change_output(self, micro_config) -> None:
        bounds = SceneBounds.from_config(micro_config)
        settings = SceneSettings.from_config(micro_config)
        serial = generate_scenes(4, 3, bounds, 'normal', settings, threads=1)
        pooled = generate_scenes(4, 3, bounds, 'normal', settings, threads=3)
        for a, b in zip(serial, pooled):
            np.testing.assert_array_equal(a.gt_map, b.gt_map)
            np.testing.assert_array_equal(a.point_bev_raster, b.point_bev_raster)

    def test_unknown_difficulty(self, small_bounds) -> None:
        with pytest.raises(ContractError):
            generate_scene(np.random.default_rng(0), small_bounds, 'chaotic')

    def test_histogram_is_log_counts(self, micro_scene) -> None:
        counts = np.expm1(micro_scene.point_bev_raster)
        np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
        assert counts.sum() > 0


# ============================================================================
# Dataset Tests
# ============================================================================

class TestDataset:
    """Test dataset directories"""

    def test_round_trip(self, tmp_path, micro_scenes, micro_config) -> None:
        bounds = SceneBounds.from_config(micro_config)
        index_path = save_dataset(str(tmp_path), micro_scenes, bounds, {'config': data_keys(micro_config)})
        assert os.path.basename(index_path) == INDEX_FILE
        loaded, loaded_bounds = load_dataset(str(tmp_path))
        assert loaded_bounds.to_dict() == bounds.to_dict()
        assert len(loaded) == len(micro_scenes)
        for original, copy in zip(micro_scenes, loaded):
            for key, value in original.arrays().items():
                np.testing.assert_array_equal(value, copy.arrays()[key])
            assert copy.corridor == original.corridor
            assert copy.difficulty == original.difficulty
        np.testing.assert_array_equal(dataset_trajectories(loaded), np.stack([s.gt_traj for s in micro_scenes]))

    def test_index_contents(self, tmp_path, micro_scenes, micro_config) -> None:
        save_dataset(str(tmp_path), micro_scenes, SceneBounds.from_config(micro_config))
        index = read_index(str(tmp_path))
        assert len(index['samples']) == 3
        assert index['classes'][0] == 'background'
        assert len(index['cameras']) == 2

    def test_missing_index(self, tmp_path) -> None:
        with pytest.raises(DatasetError):
            read_index(str(tmp_path))

    def test_unsupported_version(self, tmp_path) -> None:
        (tmp_path / INDEX_FILE).write_text(json.dumps({'version': 99, 'samples': []}))
        with pytest.raises(DatasetError):
            read_index(str(tmp_path))

    def test_incomplete_sample(self, tmp_path) -> None:
        path = write_container(str(tmp_path / 'scene.gfc'), {'gt_map': np.zeros((2, 2))}, {})
        with pytest.raises(DatasetError):
            load_sample(path)

    def test_data_keys(self, micro_config) -> None:
        keys = data_keys(micro_config)
        assert keys['raster.h'] == 8
        assert keys['camera.count'] == 2
        assert 'planner.horizon' in keys
        assert 'backbone.bev_bins' in keys
        assert 'gaussians.count' not in keys

    def test_align_config(self, micro_config) -> None:
        aligned = align_config(Config(), {'config': data_keys(micro_config)})
        assert aligned['raster.h'] == 8
        assert aligned['camera.width'] == 16
        assert aligned['planner.horizon'] == 4
        assert aligned['gaussians.count'] == Config()['gaussians.count']

    def test_align_without_stored_config(self) -> None:
        config = Config()
        assert align_config(config, {}) is config


# ============================================================================
# Evaluator Tests
# ============================================================================

class TestEvaluatorMetrics:
    """Test map and trajectory metrics"""

    def test_confusion_matrix(self) -> None:
        pred = np.array([[0, 1], [2, 3]])
        gt = np.array([[0, 1], [2, 2]])
        expected = np.zeros((4, 4), dtype=int)
        expected[0, 0] = expected[1, 1] = expected[2, 2] = expected[2, 3] = 1
        np.testing.assert_array_equal(confusion_matrix(pred, gt, 4), expected)

    def test_iou_absent_class_is_none(self) -> None:
        ious = iou_per_class(confusion_matrix(np.array([0, 1, 1]), np.array([0, 1, 0]), 3))
        assert ious == [0.5, 0.5, None]

    def test_perfect_prediction(self) -> None:
        gt = np.array([[0, 1], [3, 4]])
        traj = np.array([[1.0, 0.0], [2.0, 0.5]])
        out = metrics(gt, gt, traj, traj, 5)
        assert out['miou'] == 1.0
        assert out['miou_fg'] == 1.0
        assert out['iou'][2] is None
        assert out['ade'] == 0.0 and out['fde'] == 0.0

    def test_ade_fde(self) -> None:
        errors = trajectory_errors(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 4.0]]), np.zeros((3, 2)))
        assert errors['ade'] == pytest.approx(8.0 / 3.0)
        assert errors['fde'] == pytest.approx(5.0)

    def test_shape_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            confusion_matrix(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 2)
        with pytest.raises(DimensionError):
            trajectory_errors(np.zeros((3, 2)), np.zeros((4, 2)))


class TestMigration:
    """Test Gaussian migration towards foreground"""

    def test_onto_foreground(self, small_raster) -> None:
        gt = np.zeros((16, 16), dtype=int)
        gt[10, 4] = 1
        target = small_raster.pixel_centers()[10, 4]
        move = migration(np.array([target + [3.0, 4.0]]), np.array([target]), gt, small_raster)
        assert move['before'] == pytest.approx(5.0)
        assert move['after'] == 0.0
        assert move['ratio'] == 0.0

    def test_no_foreground(self, small_raster) -> None:
        assert foreground_distance(np.zeros((2, 2)), np.zeros((16, 16), dtype=int), small_raster) is None


class TestEvaluator:
    """Test dataset-level accumulation"""

    def test_miou_from_summed_confusion(self, small_raster) -> None:
        """Two scenes reduce through one confusion matrix, not a mean of per-scene scores."""
        evaluator = Evaluator(2, small_raster)
        traj = np.zeros((2, 2))
        ones = np.ones((2, 2), dtype=int)
        evaluator.add(ones, ones, traj, traj)
        evaluator.add(ones, np.zeros((2, 2), dtype=int), traj + [3.0, 4.0], traj)
        report = evaluator.evaluate()
        assert report['scenes'] == 2
        assert report['iou'] == [0.0, 0.5]
        assert report['miou'] == pytest.approx(0.25)
        assert report['ade'] == pytest.approx(2.5)
        assert report['migration'] == {'before': None, 'after': None, 'ratio': None}

    def test_logs_report(self, small_raster, caplog) -> None:
        evaluator = Evaluator(2, small_raster)
        evaluator.add(np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int), np.zeros((1, 2)),
                      np.zeros((1, 2)))
        with caplog.at_level(logging.INFO, logger='gaussfusion'):
            evaluator.evaluate()
        events = [json.loads(r.getMessage()) for r in caplog.records if r.name == 'gaussfusion']
        assert events[-1]['event'] == 'evaluation'
        assert events[-1]['payload']['scenes'] == 1


# ============================================================================
# Export Tests
# ============================================================================

class TestExport:
    """Test PPM and SVG exports"""

    def test_ppm_layout(self) -> None:
        class_map = np.array([[0, 3, 1]])
        blob = encode_ppm(class_map)
        header = b"P6\n3 1\n255\n"
        assert blob.startswith(header)
        pixels = np.frombuffer(blob[len(header):], dtype=np.uint8).reshape(1, 3, 3)
        np.testing.assert_array_equal(pixels[0, 1], CLASS_PALETTE[3])
        assert len(blob) == len(header) + 9

    def test_ppm_rejects_non_map(self) -> None:
        with pytest.raises(ContractError):
            encode_ppm(np.zeros((2, 2, 2), dtype=int))

    def test_write_ppm(self, tmp_path) -> None:
        path = write_ppm(str(tmp_path / 'map.ppm'), np.zeros((4, 5), dtype=int), channels=5)
        assert open(path, 'rb').read().startswith(b"P6\n5 4\n255\n")

    def test_overlay_svg(self, tmp_path, small_raster) -> None:
        class_map = np.zeros((16, 16), dtype=int)
        class_map[4:8, 2:6] = 3
        trajs = [np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([[1.0, 1.0], [2.0, 2.0]])]
        kwargs = dict(trajectories=trajs, scores=[0.2, 1.0], selected=1, gt_traj=trajs[0],
                      means=np.zeros((1, 2)), scales=np.ones((1, 2)), rotations=np.array([[1.0, 0.0]]))
        first = write_overlay_svg(str(tmp_path / 'a' / 'plan.svg'), class_map, small_raster, **kwargs)
        second = write_overlay_svg(str(tmp_path / 'b.svg'), class_map, small_raster, **kwargs)
        text = open(first, encoding='utf-8').read()
        assert '<svg' in text
        assert text == open(second, encoding='utf-8').read()


# ============================================================================
# Backbone Tests
# ============================================================================

class TestBackbone:
    """Test the toy convolution backbones"""

    def test_pyramid_shapes(self, micro_scene, micro_config) -> None:
        backbone = ToyBackbone.from_config(ParameterStore(0), micro_config)
        bev, img = encode_features(micro_scene, backbone, SceneBounds.from_config(micro_config))
        assert [lvl.shape for lvl in bev.levels] == [(8, 4, 4), (8, 2, 2)]
        assert [lvl.shape for lvl in img.levels] == [(2, 8, 4, 8), (2, 8, 2, 4)]
        assert len(img.cameras) == 2
        assert all((lvl.values >= 0).all() for lvl in bev.levels)

    def test_deterministic(self, micro_scene, micro_config) -> None:
        bounds = SceneBounds.from_config(micro_config)
        a = encode_features(micro_scene, ToyBackbone.from_config(ParameterStore(3), micro_config), bounds)
        b = encode_features(micro_scene, ToyBackbone.from_config(ParameterStore(3), micro_config), bounds)
        for x, y in zip(a[0].levels + a[1].levels, b[0].levels + b[1].levels):
            np.testing.assert_array_equal(x.values, y.values)

    def test_parameter_paths(self, micro_config) -> None:
        store = ParameterStore(0)
        ToyBackbone.from_config(store, micro_config)
        assert 'backbone.points.conv0.w' in store.paths()
        assert 'backbone.images.conv1.b' in store.paths()
