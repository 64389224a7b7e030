from typing import Dict, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import precision_recall_curve

from utility.errors import MetricError


def _prepare(labels: Sequence[int], scores: Sequence[float]):
    labels_array = np.asarray(labels).astype(bool)
    scores_array = np.asarray(scores, dtype=np.float64)
    if labels_array.shape != scores_array.shape or labels_array.ndim != 1:
        raise MetricError(f'labels {labels_array.shape} and scores {scores_array.shape} must be matching vectors')
    if not np.all(np.isfinite(scores_array)):
        raise MetricError('scores must be finite')
    positives = int(labels_array.sum())
    negatives = int(len(labels_array) - positives)
    if positives == 0 or negatives == 0:
        raise MetricError('AUROC needs both normal and anomalous samples')
    return labels_array, scores_array, positives, negatives


def auroc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney statistic from average ranks; ties between classes count one half."""
    labels_array, scores_array, positives, negatives = _prepare(labels, scores)
    ranks = pd.Series(scores_array).rank(method='average').to_numpy()
    u_statistic = ranks[labels_array].sum() - positives * (positives + 1) / 2.0
    return float(u_statistic / (positives * negatives))


def pairwise_auroc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """O(n^2) reference: fraction of (anomalous, normal) pairs ordered correctly."""
    labels_array, scores_array, positives, negatives = _prepare(labels, scores)
    anomalous = scores_array[labels_array]
    normal = scores_array[~labels_array]
    greater = 0
    ties = 0
    for score in anomalous:
        greater += int(np.sum(score > normal))
        ties += int(np.sum(score == normal))
    return float((greater + 0.5 * ties) / (positives * negatives))


def best_f1_threshold(labels: Sequence[int], scores: Sequence[float]) -> Dict[str, float]:
    """Operating point maximizing F1; report-only."""
    labels_array, scores_array, _, _ = _prepare(labels, scores)
    precision, recall, thresholds = precision_recall_curve(labels_array.astype(int), scores_array)
    precision, recall = precision[:-1], recall[:-1]
    denominator = precision + recall
    f1 = np.divide(2.0 * precision * recall, denominator, out=np.zeros_like(denominator), where=denominator > 0)
    best = int(np.argmax(f1))
    return {'threshold': float(thresholds[best]), 'f1': float(f1[best]),
            'precision': float(precision[best]), 'recall': float(recall[best])}
