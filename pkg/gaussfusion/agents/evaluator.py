# gaussfusion/agents/evaluator.py
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from gaussfusion.core.errors import DimensionError
from gaussfusion.core.observability import Observability
from gaussfusion.render.renderer import RasterConfig

Metric = Union[float, None, List[Optional[float]]]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, classes: int) -> np.ndarray:
    """(classes, classes) counts; rows are ground truth, columns predictions."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return np.bincount(gt.reshape(-1) * classes + pred.reshape(-1), minlength=classes * classes).reshape(
        classes, classes)


def iou_per_class(confusion: np.ndarray) -> List[Optional[float]]:
    """IoU per class; None where the class appears in neither map."""
    tp = np.diag(confusion).astype(float)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    return [float(t / u) if u > 0 else None for t, u in zip(tp, union)]


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def trajectory_errors(pred_traj: np.ndarray, gt_traj: np.ndarray) -> Dict[str, float]:
    pred_traj, gt_traj = np.asarray(pred_traj, dtype=float), np.asarray(gt_traj, dtype=float)
    if pred_traj.shape != gt_traj.shape:
        raise DimensionError(f"predicted trajectory {pred_traj.shape} and ground truth {gt_traj.shape} differ")
    dist = np.linalg.norm(pred_traj - gt_traj, axis=-1)
    return {'ade': float(dist.mean()), 'fde': float(dist[-1])}


def metrics(pred_map: np.ndarray, gt_map: np.ndarray, pred_traj: np.ndarray, gt_traj: np.ndarray,
            classes: int) -> Dict[str, Metric]:
    """mIoU over ``classes`` (background included) from argmax maps, foreground mIoU, ADE and FDE.

    Classes absent from both maps are reported as None and left out of the means.
    """
    ious = iou_per_class(confusion_matrix(pred_map, gt_map, classes))
    out: Dict[str, Metric] = {'iou': ious, 'miou': _mean(ious), 'miou_fg': _mean(ious[1:])}
    out.update(trajectory_errors(pred_traj, gt_traj))
    return out


def foreground_distance(means: np.ndarray, gt_map: np.ndarray, raster: RasterConfig) -> Optional[float]:
    """Mean distance from each Gaussian mean to the nearest non-background pixel center."""
    fg = np.asarray(gt_map) > 0
    if not fg.any() or len(means) == 0:
        return None
    centers = raster.pixel_centers()[fg]
    return float(cdist(np.asarray(means), centers).min(axis=1).mean())


def migration(before: np.ndarray, after: np.ndarray, gt_map: np.ndarray, raster: RasterConfig) -> Dict[str, Metric]:
    start = foreground_distance(before, gt_map, raster)
    end = foreground_distance(after, gt_map, raster)
    ratio = end / start if start and end is not None else None
    return {'before': start, 'after': end, 'ratio': ratio}


class Evaluator:
    """Accumulates per-scene metrics and reduces them to one report."""

    def __init__(self, classes: int, raster: RasterConfig):
        self.classes = classes
        self.raster = raster
        self.confusion = np.zeros((classes, classes), dtype=np.int64)
        self.ade: List[float] = []
        self.fde: List[float] = []
        self.before: List[float] = []
        self.after: List[float] = []

    def add(self, pred_map: np.ndarray, gt_map: np.ndarray, pred_traj: np.ndarray, gt_traj: np.ndarray,
            means_before: Optional[np.ndarray] = None, means_after: Optional[np.ndarray] = None) -> None:
        self.confusion += confusion_matrix(pred_map, gt_map, self.classes)
        errors = trajectory_errors(pred_traj, gt_traj)
        self.ade.append(errors['ade'])
        self.fde.append(errors['fde'])
        if means_before is not None and means_after is not None:
            move = migration(means_before, means_after, gt_map, self.raster)
            if move['before'] is not None:
                self.before.append(move['before'])
                self.after.append(move['after'])

    def evaluate(self) -> Dict[str, Metric]:
        """Dataset-level mIoU from the summed confusion matrix; ADE/FDE and migration averaged per scene."""
        ious = iou_per_class(self.confusion)
        before = _mean(self.before)
        after = _mean(self.after)
        report = {
            'scenes': len(self.ade),
            'iou': ious,
            'miou': _mean(ious),
            'miou_fg': _mean(ious[1:]),
            'ade': _mean(self.ade),
            'fde': _mean(self.fde),
            'migration': {'before': before, 'after': after,
                          'ratio': after / before if before and after is not None else None},
        }
        Observability.log('evaluation', {k: v for k, v in report.items() if k != 'iou'})
        return report
