"""
Binary classification metrics (positive class = 1 = anomaly).

Zero denominators yield 0 and are recorded in the `degenerate` field instead of
raising. ROC-AUC uses the Mann-Whitney formulation with ties counted as 1/2.
"""

import numpy as np
from loguru import logger
from scipy.stats import rankdata

from .structures import ClassificationMetrics, ConfusionMatrix, MetricsBundle


def confusion(predictions: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    predictions = np.asarray(predictions).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in length")
    if predictions.size == 0:
        raise ValueError("cannot build a confusion matrix from zero samples")
    return ConfusionMatrix(
        tp=int(np.sum((predictions == 1) & (labels == 1))),
        tn=int(np.sum((predictions == 0) & (labels == 0))),
        fp=int(np.sum((predictions == 1) & (labels == 0))),
        fn=int(np.sum((predictions == 0) & (labels == 1))),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def classification_metrics(cm: ConfusionMatrix) -> ClassificationMetrics:
    """Accuracy, precision, recall and F1 from confusion counts."""
    if cm.total <= 0:
        raise ValueError("confusion matrix is empty")

    degenerate = []
    if cm.tp + cm.fp == 0:
        degenerate.append("precision")
    if cm.tp + cm.fn == 0:
        degenerate.append("recall")

    accuracy = (cm.tp + cm.tn) / cm.total
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")

    if degenerate:
        logger.warning(f"Degenerate metrics {degenerate} for confusion {cm.as_dict()}; reported as 0")
    return ClassificationMetrics(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1, degenerate=tuple(degenerate)
    )


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """
    Probability that a random positive outscores a random negative.

    Computed from average ranks, which gives tied pairs half credit.

    Raises:
        ValueError: If only one class is present or lengths differ
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"roc_auc needs both classes, got {n_pos} positive / {n_neg} negative")

    ranks = rankdata(scores, method="average")
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def metrics_bundle(probs: np.ndarray, labels: np.ndarray, loss: float, threshold: float = 0.5) -> MetricsBundle:
    """Full metric set for one evaluation, thresholding probabilities with ties -> 1."""
    cm = confusion((np.asarray(probs) >= threshold).astype(np.int64), labels)
    basic = classification_metrics(cm)
    return MetricsBundle(
        accuracy=basic.accuracy,
        precision=basic.precision,
        recall=basic.recall,
        f1=basic.f1,
        auc=roc_auc(probs, labels),
        loss=loss,
        confusion=cm,
        degenerate=basic.degenerate,
    )
