"""Segmentation and classification metrics."""

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from . import _validation


def _pair(prediction, reference):
    a, b = np.asarray(prediction), np.asarray(reference)
    _validation.check_same_shape(a, b, "masks")
    return _validation.check_mask(a, a.shape), _validation.check_mask(b, b.shape)


def dice(prediction, reference):
    """2|A∩B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    a, b = _pair(prediction, reference)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def _nearest_distances(src, dst):
    """Euclidean distance from every ``src`` pixel to its nearest ``dst`` pixel."""
    return ndimage.distance_transform_edt(~dst)[src]


def ahd95(prediction, reference, percentile=95.0):
    """Percentile of pooled bidirectional nearest-neighbour distances (pixels).

    Distances run between pixel centres of the full masks, not only
    their boundaries.
    """
    a, b = _pair(prediction, reference)
    if not a.any() or not b.any():
        raise ValueError("ahd95 is undefined when either mask is empty")
    pooled = np.concatenate([_nearest_distances(a, b), _nearest_distances(b, a)])
    return float(np.percentile(pooled, percentile))


def hausdorff(prediction, reference):
    a, b = _pair(prediction, reference)
    if not a.any() or not b.any():
        raise ValueError("Hausdorff distance is undefined when either mask is empty")
    return float(max(_nearest_distances(a, b).max(), _nearest_distances(b, a).max()))


def accuracy(predictions, labels):
    p = _validation.check_binary_labels(predictions, "predictions")
    y = _validation.check_binary_labels(labels)
    _validation.check_same_shape(p, y, "predictions and labels")
    return float(np.mean(p == y))


def auroc(scores, labels):
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _validation.check_binary_labels(labels)
    _validation.check_same_shape(s, y, "scores and labels")
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
