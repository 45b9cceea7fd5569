"""
Binary-segmentation evaluation: MAE, precision/recall, F-beta and PR curves.

Predictions are maps in [0, 1]; ground truths are binary.  A pixel is
predicted positive at integer threshold ``t`` when ``pred * 255 >= t``,
for the 256 thresholds 0..255.  Per threshold, precision and recall are
averaged over images first and F-beta is computed from the averages;
maxF is the largest F-beta on that curve.

Degenerate images keep the curve defined: precision is 1 when nothing
is predicted positive, recall is 1 when the ground truth is empty, and
F-beta is 0 when its denominator vanishes.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

BETA_SQ = 0.3
THRESHOLDS = np.arange(256, dtype=np.int64)


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_beta: np.ndarray

    @property
    def max_f_beta(self) -> float:
        return float(self.f_beta.max())


@dataclass
class MetricReport:
    dataset: str
    per_image_mae: List[float]
    mean_mae: float
    curve: PRCurve
    max_f_beta: float
    count: int
    identifiers: List[str] = field(default_factory=list)

    def summary_row(self) -> Tuple[str, int, float, float]:
        return (self.dataset, self.count, self.mean_mae, self.max_f_beta)


def _as_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _as_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def pr_at_threshold(pred, gt, t: int) -> Tuple[float, float]:
    pred, gt = _as_pair(pred, gt)
    positive = pred * 255.0 >= t
    tp = int(np.count_nonzero(positive & gt))
    fp = int(np.count_nonzero(positive & ~gt))
    fn = int(np.count_nonzero(~positive & gt))
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def f_beta(precision, recall, beta_sq: float = BETA_SQ):
    """Weighted harmonic mean; works on scalars and arrays alike."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    denominator = beta_sq * precision + recall
    safe = np.where(denominator > 0, denominator, 1.0)
    score = np.where(denominator > 0, (1.0 + beta_sq) * precision * recall / safe, 0.0)
    return float(score) if score.ndim == 0 else score


def confusion_counts(pred, gt) -> Tuple[np.ndarray, np.ndarray, int]:
    """TP and FP counts at all 256 thresholds plus the number of positive pixels.

    ``pred * 255 >= t`` holds for integer ``t`` exactly when
    ``floor(pred * 255) >= t``, so one histogram of the floored scores
    and a reversed cumulative sum give every threshold at once.
    """
    pred, gt = _as_pair(pred, gt)
    bins = np.clip(np.floor(pred * 255.0), 0, 255).astype(np.int64)
    positives = np.bincount(bins[gt], minlength=256)
    negatives = np.bincount(bins[~gt], minlength=256)
    tp = np.cumsum(positives[::-1])[::-1]
    fp = np.cumsum(negatives[::-1])[::-1]
    return tp, fp, int(np.count_nonzero(gt))


def image_curve(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    tp, fp, total = confusion_counts(pred, gt)
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / total if total else np.ones(256, dtype=np.float64)
    return precision, recall


def resize_to(pred, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a prediction map to a ground truth's native size."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape == tuple(shape):
        return pred
    tensor = torch.from_numpy(np.ascontiguousarray(pred))[None, None]
    return F.interpolate(tensor, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def _score(pair) -> Tuple[float, np.ndarray, np.ndarray]:
    pred, gt = pair
    pred = resize_to(pred, np.shape(gt))
    precision, recall = image_curve(pred, gt)
    return mae(pred, gt), precision, recall


def evaluate_corpus(
    predictions: Sequence,
    gts: Sequence,
    dataset: str = "",
    beta_sq: float = BETA_SQ,
    workers: int = 1,
    identifiers: Sequence[str] = (),
) -> MetricReport:
    """Score aligned prediction maps against ground-truth masks."""
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions for {len(gts)} ground truths")
    if not gts:
        raise ValueError("nothing to evaluate")

    pairs = list(zip(predictions, gts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(_score, pairs))
    else:
        scored = [_score(pair) for pair in pairs]

    count = len(scored)
    maes = [s[0] for s in scored]
    precisions = np.stack([s[1] for s in scored])
    recalls = np.stack([s[2] for s in scored])
    # fsum is exact, so the averages do not depend on image order
    precision = np.array([math.fsum(precisions[:, t]) / count for t in range(256)])
    recall = np.array([math.fsum(recalls[:, t]) / count for t in range(256)])
    curve = PRCurve(THRESHOLDS.copy(), precision, recall, f_beta(precision, recall, beta_sq))
    report = MetricReport(
        dataset=dataset,
        per_image_mae=maes,
        mean_mae=math.fsum(maes) / count,
        curve=curve,
        max_f_beta=curve.max_f_beta,
        count=count,
        identifiers=list(identifiers),
    )
    logger.info("%s: %d images, MAE %.4f, maxF %.4f", dataset or "corpus", count, report.mean_mae, report.max_f_beta)
    return report
