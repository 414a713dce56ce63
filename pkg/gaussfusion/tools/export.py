"""Image exports: class maps as PPM, trajectory and Gaussian overlays as SVG."""
import logging
import os
from typing import Optional, Sequence

import matplotlib
matplotlib.use('Agg')
from matplotlib import rc_context
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Ellipse

import numpy as np

from gaussfusion.core.errors import ContractError, DatasetError
from gaussfusion.render.renderer import RasterConfig

logger = logging.getLogger(__name__)

# background, drivable, lane line, vehicle, ego path; extra classes cycle
CLASS_PALETTE = np.array([
    [20, 20, 20],
    [110, 110, 120],
    [240, 240, 230],
    [210, 50, 40],
    [60, 160, 230],
], dtype=np.uint8)


def palette(channels: int) -> np.ndarray:
    return CLASS_PALETTE[np.arange(channels) % len(CLASS_PALETTE)]


def encode_ppm(class_map: np.ndarray, channels: Optional[int] = None) -> bytes:
    """Binary P6 image of an (H, W) class-index map; row 0 is the top line."""
    class_map = np.asarray(class_map)
    if class_map.ndim != 2:
        raise ContractError(f"class map must be 2-D, got shape {class_map.shape}")
    channels = channels or int(class_map.max(initial=0)) + 1
    rgb = palette(channels)[class_map]
    h, w = class_map.shape
    return f"P6\n{w} {h}\n255\n".encode('ascii') + rgb.astype(np.uint8).tobytes()


def write_ppm(path: str, class_map: np.ndarray, channels: Optional[int] = None) -> str:
    try:
        with open(path, 'wb') as fh:
            fh.write(encode_ppm(class_map, channels))
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return path


def write_overlay_svg(path: str, class_map: np.ndarray, raster: RasterConfig,
                      trajectories: Sequence[np.ndarray] = (), scores: Optional[Sequence[float]] = None,
                      selected: Optional[int] = None, gt_traj: Optional[np.ndarray] = None,
                      means: Optional[np.ndarray] = None, scales: Optional[np.ndarray] = None,
                      rotations: Optional[np.ndarray] = None) -> str:
    """Trajectories (and optionally Gaussian 1-sigma ellipses) drawn over the argmax map.

    Coordinates are converted to raster (row, col); rows are drawn downwards.
    """
    class_map = np.asarray(class_map)
    fig = Figure(figsize=(6, 6))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(palette(int(class_map.max(initial=0)) + 1)[class_map], interpolation='nearest')
    if means is not None and scales is not None and rotations is not None:
        px = raster.to_pixel(means)
        angles = np.degrees(np.arctan2(rotations[:, 1], rotations[:, 0]))
        for (row, col), (sx, sy), angle in zip(px, scales / raster.resolution, angles):
            # x runs down the rows, so the ellipse axes swap on screen
            ax.add_patch(Ellipse((col, row), 2 * sy, 2 * sx, angle=-angle, fill=False, lw=0.5, color='yellow'))
    weights = None
    if scores is not None and len(scores):
        s = np.asarray(scores, dtype=float)
        weights = np.exp(s - s.max())
        weights = weights / weights.sum()
    for i, traj in enumerate(trajectories):
        px = raster.to_pixel(traj)
        alpha = 0.3 if weights is None else 0.15 + 0.85 * float(weights[i] / weights.max())
        color, width = ('lime', 2.0) if i == selected else ('orange', 1.0)
        ax.plot(px[:, 1], px[:, 0], '-o', color=color, lw=width, ms=2, alpha=alpha)
    if gt_traj is not None:
        px = raster.to_pixel(gt_traj)
        ax.plot(px[:, 1], px[:, 0], '--', color='white', lw=1.0)
    ax.set_xlim(-0.5, class_map.shape[1] - 0.5)
    ax.set_ylim(class_map.shape[0] - 0.5, -0.5)
    ax.set_axis_off()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with rc_context({'svg.hashsalt': 'gaussfusion'}):
        try:
            fig.savefig(path, format='svg', metadata={'Date': None})
        except OSError as exc:
            raise DatasetError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote overlay %s", path)
    return path
