# gaussfusion/tools/dataset.py
"""Dataset directories: ``index.json`` plus one container per scene."""
import json
import logging
import os
from typing import List, Mapping, Sequence, Tuple

import numpy as np

from gaussfusion.core.config import Config
from gaussfusion.core.errors import DatasetError
from gaussfusion.memory.container import read_container, write_container
from gaussfusion.scene.gaussians import SceneBounds
from gaussfusion.scene.sensors import CameraModel
from gaussfusion.tools.synth import CLASS_NAMES, Corridor, SceneSample

logger = logging.getLogger(__name__)

INDEX_FILE = 'index.json'
FORMAT_VERSION = 1


def sample_name(i: int) -> str:
    return f"scene_{i:05d}.gfc"


def save_dataset(directory: str, samples: Sequence[SceneSample], bounds: SceneBounds,
                 extra: dict = None) -> str:
    """Write every sample and the index; returns the index path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        name = sample_name(i)
        write_container(os.path.join(directory, name), sample.arrays(), sample.meta())
        entries.append({'file': name, 'difficulty': sample.difficulty, 'corridor': sample.corridor.kind,
                        'vehicles': int(len(sample.vehicles))})
    index = {
        'version': FORMAT_VERSION,
        'samples': entries,
        'bounds': bounds.to_dict(),
        'classes': list(CLASS_NAMES),
        'cameras': [c.to_dict() for c in samples[0].cameras] if samples else [],
    }
    index.update(extra or {})
    path = os.path.join(directory, INDEX_FILE)
    try:
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(index, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    logger.info("saved %d scenes to %s", len(samples), directory)
    return path


def read_index(directory: str) -> dict:
    path = os.path.join(directory, INDEX_FILE)
    if not os.path.isfile(path):
        raise DatasetError(f"no dataset index at {path}")
    try:
        with open(path, encoding='utf-8') as fh:
            index = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if index.get('version') != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {index.get('version')}")
    return index


def load_sample(path: str) -> SceneSample:
    arrays, meta = read_container(path)
    try:
        cameras = [CameraModel(p, c['height'], c['width'])
                   for p, c in zip(arrays['camera_projections'], meta['cameras'])]
        return SceneSample(
            gt_map=arrays['gt_map'],
            gt_traj=arrays['gt_traj'],
            camera_rasters=arrays['camera_rasters'],
            point_bev_raster=arrays['point_bev_raster'],
            cameras=cameras,
            ego_state=arrays['ego_state'],
            vehicles=arrays['vehicles'],
            corridor=Corridor.from_dict(meta['corridor']),
            difficulty=meta['difficulty'],
        )
    except KeyError as exc:
        raise DatasetError(f"{path}: missing field {exc}") from exc


def load_dataset(directory: str) -> Tuple[List[SceneSample], SceneBounds]:
    index = read_index(directory)
    samples = [load_sample(os.path.join(directory, entry['file'])) for entry in index['samples']]
    return samples, SceneBounds(**index['bounds'])


def dataset_trajectories(samples: Sequence[SceneSample]) -> np.ndarray:
    return np.stack([s.gt_traj for s in samples]) if samples else np.zeros((0, 0, 2))


# keys that fix the shape of stored scenes; a model reading the dataset must agree on them
DATA_KEY_PREFIXES = ('scene.', 'raster.', 'camera.', 'backbone.bev_bins', 'planner.horizon')


def data_keys(config: Mapping) -> dict:
    return {k: config[k] for k in config if k.startswith(DATA_KEY_PREFIXES)}


def align_config(config: Config, index: Mapping) -> Config:
    """``config`` with the dataset's scene geometry and sensor layout taken from ``index``."""
    stored = index.get('config')
    if not stored:
        return config
    changed = {k: v for k, v in stored.items() if k in config and config[k] != v}
    if changed:
        logger.info("using dataset values for %s", ', '.join(sorted(changed)))
    return config.updated(changed)
