"""Classification metrics, cross-validation, and class-activation heatmaps.

Accuracy and support-weighted F1 come from the confusion matrix; the
agreement statistic uses quadratic distance weights and marginal-product
expected counts; ranking quality is the Mann-Whitney statistic with half
credit for ties, reduced one-vs-rest (macro) for more than two classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError, MetricError
from .tensor import Tensor, mul, tsum

ROW_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PredictionSet:
    """Per-sample class probabilities with ground-truth labels."""

    probabilities: np.ndarray   # (N, K), rows sum to 1
    labels: np.ndarray          # (N,) integer classes

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        labels = np.asarray(self.labels)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise DimensionError("probabilities (N, K) and labels (N,) required")
        if probs.shape[0] == 0:
            raise ArgumentError("empty prediction set")
        if probs.min() < 0 or probs.max() > 1:
            raise ArgumentError("probabilities must lie in [0, 1]")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_SUM_TOLERANCE:
            raise ArgumentError("probability rows must sum to 1")
        if labels.min() < 0 or labels.max() >= probs.shape[1]:
            raise ArgumentError("labels out of range")
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "labels", labels.astype(int))

    @property
    def predictions(self) -> np.ndarray:
        return self.probabilities.argmax(axis=1)

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, predictions):
        matrix[t, p] += 1
    return matrix


def compute_metrics(preds: PredictionSet) -> dict[str, float]:
    """Accuracy and support-weighted F1 (absent-prediction classes score 0)."""
    labels = preds.labels
    predicted = preds.predictions
    k = preds.num_classes
    accuracy = float((predicted == labels).mean())
    matrix = confusion_matrix(labels, predicted, k)
    support = matrix.sum(axis=1)
    f1_sum = 0.0
    for c in range(k):
        if support[c] == 0:
            continue
        tp = matrix[c, c]
        predicted_c = matrix[:, c].sum()
        precision = tp / predicted_c if predicted_c else 0.0
        recall = tp / support[c]
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1_sum += support[c] * f1
    return {"accuracy": accuracy, "weighted_f1": f1_sum / labels.size}


def quadratic_kappa(labels, predictions, num_classes: int) -> float:
    """Chance-corrected agreement with squared-distance disagreement weights."""
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if num_classes < 2:
        raise ArgumentError("kappa needs at least 2 classes")
    if labels.size == 0 or labels.shape != predictions.shape:
        raise DimensionError("labels and predictions must be equal-length vectors")
    if min(labels.min(), predictions.min()) < 0 or max(
        labels.max(), predictions.max()
    ) >= num_classes:
        raise ArgumentError("class indices out of range")
    observed = confusion_matrix(labels, predictions, num_classes).astype(np.float64)
    idx = np.arange(num_classes, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / labels.size
    denom = float((weights * expected).sum())
    if denom == 0.0:
        raise MetricError("kappa undefined: zero expected disagreement")
    return 1.0 - float((weights * observed).sum()) / denom


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_binary(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both classes present")
    ranks = _average_ranks(scores)
    return float(
        (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )


def auc_ovr_macro(probabilities: np.ndarray, labels) -> float:
    """One-vs-rest macro AUC over classes with both outcomes present."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    values = []
    for c in range(probabilities.shape[1]):
        positives = labels == c
        if positives.any() and (~positives).any():
            values.append(auc_binary(probabilities[:, c], positives))
    if not values:
        raise MetricError("AUC undefined: every class is degenerate")
    return float(np.mean(values))


def evaluate_predictions(preds: PredictionSet) -> dict[str, float]:
    """All four benchmark metrics for one prediction set."""
    out = compute_metrics(preds)
    out["kappa"] = quadratic_kappa(preds.labels, preds.predictions,
                                   preds.num_classes)
    if preds.num_classes == 2:
        out["auc"] = auc_binary(preds.probabilities[:, 1], preds.labels == 1)
    else:
        out["auc"] = auc_ovr_macro(preds.probabilities, preds.labels)
    return out


METRIC_NAMES = ("accuracy", "weighted_f1", "kappa", "auc")


@dataclass(frozen=True)
class CrossValidationResult:
    folds: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]


def cross_validate(labels, train_fn, k: int = 5, seed: int = 0) -> CrossValidationResult:
    """Stratified k-fold evaluation of a training procedure.

    ``train_fn(train_idx, test_idx, fold_seed)`` must return a
    :class:`PredictionSet` for the held-out fold. Fold seeds derive
    deterministically from (seed, fold index).
    """
    from .data import stratified_kfold
    from .training import derive_seed

    folds = stratified_kfold(labels, k, seed)
    rows = []
    for fold_index, (train_idx, test_idx) in enumerate(folds):
        preds = train_fn(train_idx, test_idx, derive_seed(seed, 100 + fold_index))
        rows.append(evaluate_predictions(preds))
    mean = {m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}
    std = {m: float(np.std([r[m] for r in rows])) for m in METRIC_NAMES}
    return CrossValidationResult(folds=rows, mean=mean, std=std)


# ---------------------------------------------------------------------------
# gradient-weighted class activation heatmaps


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray          # (H, W) in [0, 1]
    source_scale: int
    target_class: int


def cam_map(activations: np.ndarray, channel_weights: np.ndarray) -> np.ndarray:
    """Rectified, min-max normalized weighted channel sum."""
    cam = np.maximum((channel_weights[:, None, None] * activations).sum(axis=0), 0.0)
    span = cam.max() - cam.min()
    if span <= 0.0:
        return np.zeros_like(cam)
    return (cam - cam.min()) / span


def gradcam(model, image: np.ndarray, target_class: int, scale: int) -> Heatmap:
    """Class-evidence heatmap from the gradients at an encoder scale.

    Channel weights are the spatial means of the target logit's gradient
    at the tapped feature map; the weighted, rectified channel sum is
    normalized and nearest-upsampled to the input resolution.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ArgumentError("gradcam explains one image at a time")
    depth = model.encoder.depth
    if not 1 <= scale <= depth:
        raise ArgumentError(f"no encoder tap at scale {scale} (1..{depth})")
    scales = model.encoder.forward(Tensor(image), training=False)
    logits = model.head(scales[-1], training=False)
    if not 0 <= target_class < logits.shape[1]:
        raise ArgumentError(f"target class {target_class} out of range")
    onehot = np.zeros(logits.shape)
    onehot[0, target_class] = 1.0
    tsum(mul(logits, Tensor(onehot))).backward()
    tap = scales[scale - 1]
    grad = tap.grad if tap.grad is not None else np.zeros_like(tap.data)
    alpha = grad[0].mean(axis=(1, 2))
    cam = cam_map(tap.data[0], alpha)
    factor = image.shape[2] // cam.shape[0]
    cam_full = np.repeat(np.repeat(cam, factor, axis=0), factor, axis=1)
    return Heatmap(values=cam_full, source_scale=scale, target_class=target_class)


def heatmap_overlay(heatmap: Heatmap, image: np.ndarray,
                    alpha: float = 0.45) -> np.ndarray:
    """Blend a red-to-blue rendering of the heatmap over the source image."""
    heat = heatmap.values
    color = np.stack([heat, 0.15 * heat, 1.0 - heat])
    return np.clip((1 - alpha) * image + alpha * color, 0.0, 1.0)


def write_metrics(path, rows: list[dict[str, float]],
                  extra_columns: dict[str, list] | None = None) -> None:
    """Line-delimited metric records, one row per evaluation."""
    columns = list(extra_columns) if extra_columns else []
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns + list(METRIC_NAMES)) + "\n")
        for i, row in enumerate(rows):
            prefix = [str(extra_columns[c][i]) for c in columns]
            fh.write(
                "\t".join(prefix + [f"{row[m]:.10g}" for m in METRIC_NAMES]) + "\n"
            )
