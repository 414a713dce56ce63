"""Flat namespaced configuration with presets, key=value files and overrides."""
import math
import os
from typing import Any, Dict, Iterable, Iterator, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from gaussfusion.core.errors import ConfigError, DatasetError

CONFIG_ENV_VAR = 'GAUSSFUSION_CONFIG'

DEFAULTS: Dict[str, Any] = {
    'seed': 0,
    'precision': 'float64',
    'threads': 1,
    'log.level': 'INFO',
    # scene extent in meters; rows of every raster run along x, columns along y
    'scene.x_min': -16.0,
    'scene.x_max': 16.0,
    'scene.y_min': -16.0,
    'scene.y_max': 16.0,
    'scene.z_min': -1.0,
    'scene.z_max': 3.0,
    'gaussians.count': 512,
    'gaussians.dim': 128,
    'gaussians.classes': 4,
    'gaussians.init_scale': 1.0,
    'gaussians.feature_std': 0.02,
    'gaussians.learnable_points': 4,
    'gaussians.pillar_points': 4,
    'raster.h': 64,
    'raster.w': 64,
    'raster.resolution': 0.5,
    'raster.cutoff': math.exp(-4.5),
    'raster.tile': 16,
    'encoder.blocks': 4,
    'encoder.heads': 4,
    'encoder.levels': 2,
    'encoder.points': 4,
    'encoder.query_reduce': 'sum',
    'encoder.use_points': True,
    'encoder.use_images': True,
    'encoder.use_implicit': True,
    'planner.stages': 2,
    'planner.anchors': 20,
    'planner.horizon': 8,
    'planner.top_m': 4,
    'planner.heads': 4,
    'planner.ego_state': False,
    'planner.vocab_pool': 256,
    'camera.count': 3,
    'camera.height': 32,
    'camera.width': 64,
    'backbone.bev_bins': 8,
    'data.count': 8,
    'data.difficulty': 'normal',
    'loss.lovasz_weight': 1.0,
    'loss.map_weight': 1.0,
    'loss.trajectory_weight': 1.0,
    'loss.trajectory': 'l1',
    'train.lr': 6e-4,
    'train.lr_min': 0.0,
    'train.weight_decay': 1e-4,
    'train.epochs': 100,
    'train.log_every': 1,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    'full': {},
    'micro': {
        'gaussians.count': 4,
        'gaussians.dim': 8,
        'raster.h': 8,
        'raster.w': 8,
        'raster.resolution': 4.0,
        'encoder.blocks': 1,
        'encoder.heads': 2,
        'encoder.points': 2,
        'planner.anchors': 3,
        'planner.horizon': 4,
        'planner.top_m': 2,
        'planner.heads': 2,
        'planner.vocab_pool': 32,
        'camera.count': 2,
        'camera.height': 8,
        'camera.width': 16,
    },
    'desk': {
        'gaussians.count': 128,
        'gaussians.dim': 64,
        'encoder.blocks': 2,
        'train.lr': 2e-3,
        'train.epochs': 300,
    },
}

CHOICES: Dict[str, tuple] = {
    'precision': ('float64', 'float32'),
    'encoder.query_reduce': ('sum', 'mean'),
    'loss.trajectory': ('l1', 'l2'),
    'data.difficulty': ('empty', 'easy', 'normal', 'hard'),
    'log.level': ('DEBUG', 'INFO', 'WARNING', 'ERROR'),
}

_TRUE = {'true', '1', 'yes', 'on'}
_FALSE = {'false', '0', 'no', 'off'}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            number = float(value)
            if not number.is_integer():
                raise ValueError(value)
            return int(number)
        if isinstance(default, float):
            return float(value)
        text = str(value).strip()
        return text.upper() if key == 'log.level' else text
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for '{key}' (expected {type(default).__name__})", key) from None


def parse_assignment(text: str) -> tuple:
    if '=' not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value", text)
    key, _, value = text.partition('=')
    return key.strip(), value.strip()


class Config(Mapping):
    """Immutable view over a validated flat key set."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'", key)
            merged[key] = _coerce(key, value)
        self._values = merged
        self._validate()

    def __getitem__(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key '{key}'", key) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        return f"Config({self.overrides()})"

    def overrides(self) -> Dict[str, Any]:
        """Keys whose value differs from the default."""
        return {k: v for k, v in self._values.items() if v != DEFAULTS[k]}

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def replace(self, **changes: Any) -> 'Config':
        """Return a copy with dotted keys given as ``section__name=value``."""
        values = dict(self._values)
        values.update({k.replace('__', '.'): v for k, v in changes.items()})
        return Config(values)

    def updated(self, changes: Mapping[str, Any]) -> 'Config':
        values = dict(self._values)
        values.update(changes)
        return Config(values)

    # ------------------------------------------------------------ validation
    def _validate(self) -> None:
        v = self._values
        for key, allowed in CHOICES.items():
            if v[key] not in allowed:
                raise ConfigError(f"'{key}' must be one of {allowed}, got {v[key]!r}", key)
        for key in ('gaussians.count', 'gaussians.dim', 'gaussians.classes', 'raster.h', 'raster.w',
                    'raster.tile', 'encoder.heads', 'encoder.levels', 'encoder.points', 'planner.stages',
                    'planner.anchors', 'planner.horizon', 'planner.top_m', 'planner.heads',
                    'camera.count', 'camera.height', 'camera.width', 'backbone.bev_bins', 'threads',
                    'planner.vocab_pool', 'gaussians.pillar_points'):
            if v[key] < 1:
                raise ConfigError(f"'{key}' must be positive, got {v[key]}", key)
        for key in ('encoder.blocks', 'gaussians.learnable_points', 'data.count', 'train.epochs'):
            if v[key] < 0:
                raise ConfigError(f"'{key}' must be non-negative, got {v[key]}", key)
        for key in ('gaussians.init_scale', 'raster.resolution', 'train.lr'):
            if v[key] <= 0:
                raise ConfigError(f"'{key}' must be > 0, got {v[key]}", key)
        if not 0.0 < v['raster.cutoff'] < 1.0:
            raise ConfigError(f"'raster.cutoff' must lie in (0, 1), got {v['raster.cutoff']}", 'raster.cutoff')
        for lo, hi in (('scene.x_min', 'scene.x_max'), ('scene.y_min', 'scene.y_max'),
                       ('scene.z_min', 'scene.z_max')):
            if v[hi] <= v[lo]:
                raise ConfigError(f"'{hi}' must exceed '{lo}'", hi)
        dim = v['gaussians.dim']
        if dim % 4:
            raise ConfigError(f"'gaussians.dim' must be divisible by 4, got {dim}", 'gaussians.dim')
        for key in ('encoder.heads', 'planner.heads'):
            if dim % v[key]:
                raise ConfigError(f"'gaussians.dim'={dim} is not divisible by '{key}'={v[key]}", key)
        if v['planner.top_m'] > v['gaussians.count']:
            raise ConfigError("'planner.top_m' cannot exceed 'gaussians.count'", 'planner.top_m')
        for axis, extent in (('h', v['scene.x_max'] - v['scene.x_min']),
                             ('w', v['scene.y_max'] - v['scene.y_min'])):
            covered = v[f'raster.{axis}'] * v['raster.resolution']
            if not math.isclose(covered, extent, rel_tol=1e-9):
                raise ConfigError(
                    f"raster.{axis} x raster.resolution = {covered} m does not cover the scene extent {extent} m",
                    f'raster.{axis}')

    # ---------------------------------------------------------------- loading
    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = (),
             preset: Optional[str] = None) -> 'Config':
        """Build a config with precedence overrides > file > preset > defaults.

        Args:
            path: key=value file; falls back to ``$GAUSSFUSION_CONFIG``.
            overrides: ``key=value`` strings from the command line.
            preset: Name of a preset in ``PRESETS``.

        Raises:
            ConfigError: Unknown key, bad value or unknown preset.
            DatasetError: The config file does not exist.
        """
        load_dotenv()
        values: Dict[str, Any] = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}", 'preset')
            values.update(PRESETS[preset])
        path = path or os.getenv(CONFIG_ENV_VAR)
        if path:
            if not os.path.isfile(path):
                raise DatasetError(f"config file not found: {path}")
            values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
        for text in overrides:
            key, value = parse_assignment(text)
            values[key] = value
        unknown = [k for k in values if k not in DEFAULTS]
        if unknown:
            raise ConfigError(f"unknown config key '{unknown[0]}'", unknown[0])
        return cls(values)

    @classmethod
    def preset(cls, name: str, **changes: Any) -> 'Config':
        """Preset values plus ``section__name=value`` changes, ignoring files and the environment."""
        if name not in PRESETS:
            raise ConfigError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}", 'preset')
        return cls(PRESETS[name]).replace(**changes)


def describe_defaults() -> str:
    """One ``key=default`` line per config key, for ``--help``."""
    return '\n'.join(f"  {key}={value}" for key, value in DEFAULTS.items())
