"""Map-construction losses: pixelwise cross-entropy plus Lovasz-softmax."""
from typing import NamedTuple

import numpy as np

from gaussfusion.core.errors import ContractError, DimensionError
from gaussfusion.core.tensor import NumericArray, stack
from gaussfusion.render.renderer import SemanticBevMap

PROB_FLOOR = 1e-12


class MapLoss(NamedTuple):
    ce: NumericArray
    lovasz: NumericArray
    total: NumericArray


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: NumericArray, labels: np.ndarray) -> NumericArray:
    """Lovasz-softmax over flattened (N, K) probabilities, averaged over classes present."""
    terms = []
    for cls in range(probs.shape[1]):
        fg = (labels == cls).astype(float)
        if fg.sum() == 0:
            continue
        errors = (probs[:, cls] - fg).abs()
        order = np.argsort(-errors.values, kind='stable')
        terms.append((errors[order] * lovasz_grad(fg[order])).sum())
    return stack(terms).mean()


def check_labels(gt: np.ndarray, height: int, width: int, channels: int) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.shape != (height, width):
        raise DimensionError(f"ground-truth map {gt.shape} does not match prediction {(height, width)}")
    if gt.size and (gt.min() < 0 or gt.max() >= channels):
        raise ContractError(f"ground-truth class indices must lie in [0, {channels - 1}]")
    return gt.astype(np.int64)


def map_loss(pred: SemanticBevMap, gt: np.ndarray, lovasz_weight: float = 1.0) -> MapLoss:
    """Cross-entropy and Lovasz-softmax of a rendered map against class indices.

    Args:
        pred: Rendered probabilities (H, W, C + 1).
        gt: (H, W) class indices in {0..C}.
        lovasz_weight: Weight of the Lovasz term in ``total``.

    Returns:
        MapLoss(ce, lovasz, total) with total = ce + lovasz_weight * lovasz.
    """
    h, w, channels = pred.probs.shape
    labels = check_labels(gt, h, w, channels).reshape(-1)
    flat = pred.probs.reshape(h * w, channels)
    true_prob = flat[np.arange(h * w), labels]
    ce = -true_prob.clamp(low=PROB_FLOOR).log().mean()
    lov = lovasz_softmax(flat, labels)
    return MapLoss(ce, lov, ce + lov * lovasz_weight)
