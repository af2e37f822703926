"""
Segmentation quality (Dice, HD95) and cross-site consistency (STD).

Boundary pixels are foreground pixels with a 4-neighbour in the background;
pixels outside the image count as background.
"""
import math
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial.distance import cdist

from app.core.errors import ShapeMismatch, TooFewSites
from app.schemas.schemas import SiteResult

_FOUR_NEIGHBOURS = generate_binary_structure(2, 1)


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    return pred, truth


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_shapes(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    return mask & ~binary_erosion(mask, structure=_FOUR_NEIGHBOURS, border_value=0)


def hd95(pred: np.ndarray, truth: np.ndarray) -> float:
    """95th percentile (linear) of both directed boundary nearest-distance sets."""
    pred, truth = _check_shapes(pred, truth)
    has_pred, has_truth = bool(pred.any()), bool(truth.any())
    if not has_pred and not has_truth:
        return 0.0
    if has_pred != has_truth:
        return math.inf
    pts_pred = np.argwhere(boundary(pred)).astype(np.float64)
    pts_truth = np.argwhere(boundary(truth)).astype(np.float64)
    dist = cdist(pts_pred, pts_truth)
    both = np.concatenate([dist.min(axis=1), dist.min(axis=0)])
    return float(np.percentile(both, 95))


def site_std(dices: Sequence[float]) -> float:
    if len(dices) < 2:
        raise TooFewSites("cross-site STD needs at least two sites")
    return float(np.std(np.asarray(dices, dtype=np.float64)))


def evaluate_site(
    site_id: str,
    predictions: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    class_names: Sequence[str],
) -> SiteResult:
    """
    One-vs-rest Dice and HD95 per foreground class, averaged over images.

    An infinite HD95 (exactly one of the masks empty) is replaced by the
    image diagonal before averaging and counted in `n_infinite_hd95`.
    """
    if len(predictions) != len(truths):
        raise ShapeMismatch("prediction and truth counts differ")
    dice_per_class, hd_per_class = {}, {}
    n_infinite = 0
    for label, name in enumerate(class_names):
        if label == 0:
            continue
        dices, hds = [], []
        for pred, truth in zip(predictions, truths):
            pred_c, truth_c = np.asarray(pred) == label, np.asarray(truth) == label
            dices.append(dice(pred_c, truth_c))
            value = hd95(pred_c, truth_c)
            if math.isinf(value):
                n_infinite += 1
                value = float(math.hypot(*np.shape(truth)))
            hds.append(value)
        dice_per_class[name] = float(np.mean(dices))
        hd_per_class[name] = float(np.mean(hds))
    return SiteResult(
        site_id=site_id,
        dice=dice_per_class,
        hd95=hd_per_class,
        mean_dice=float(np.mean(list(dice_per_class.values()))),
        mean_hd95=float(np.mean(list(hd_per_class.values()))),
        n_images=len(predictions),
        n_infinite_hd95=n_infinite,
    )
