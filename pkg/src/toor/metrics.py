"""Detection metrics, score histograms and accuracy recomputation."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def auroc(scores, positive) -> float | None:
    """Area under the ROC curve by the rank statistic (ties count 0.5).

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks handle ties
    u_stat = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def auroc_bruteforce(scores, positive) -> float | None:
    """All-pairs AUROC; quadratic, for cross-checking :func:`auroc`."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        return None
    total = 0.0
    for p in pos:
        total += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return float(total / (len(pos) * len(neg)))


def detection_metrics(score, tag, truth) -> dict:
    """Precision/recall of the ID tags and AUROC of the stabilized score,
    with true ID as the positive class.  ``far_auroc`` and ``near_auroc``
    restrict the negatives to one OOD role."""
    score = np.asarray(score, dtype=np.float64)
    tag = np.asarray(tag)
    truth = np.asarray(truth)
    if not (len(score) == len(tag) == len(truth)):
        raise ValueError("score, tag and truth must align")
    true_id = truth == "ID"
    pred_id = tag == "ID"
    hit = int(np.sum(true_id & pred_id))
    out = {
        "n": int(len(score)),
        "precision": hit / int(pred_id.sum()) if pred_id.any() else None,
        "recall": hit / int(true_id.sum()) if true_id.any() else None,
        "auroc": auroc(score, true_id),
    }
    for role, key in (("farOOD", "far_auroc"), ("nearOOD", "near_auroc")):
        keep = true_id | (truth == role)
        out[key] = auroc(score[keep], true_id[keep]) if (truth == role).any() else None
    return out


def score_histogram(score, truth, bins: int = 50):
    """Counts of ID and OOD scores in ``bins`` uniform bins over [0, 1]."""
    score = np.asarray(score, dtype=np.float64)
    is_id = np.asarray(truth) == "ID"
    edges = np.linspace(0.0, 1.0, bins + 1)
    id_counts, _ = np.histogram(score[is_id], edges)
    ood_counts, _ = np.histogram(score[~is_id], edges)
    return edges[:-1], id_counts, ood_counts


def write_histogram(score, truth, path, bins: int = 50) -> Path:
    path = Path(path)
    left, idc, oodc = score_histogram(score, truth, bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "id_count", "ood_count"])
        for a, b, c in zip(left, idc, oodc):
            w.writerow([repr(float(a)), int(b), int(c)])
    return path


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(labels, predictions):
        cm[int(t), int(p)] += 1
    return cm


def accuracy_from_predictions(path) -> float:
    """Recompute accuracy from a ``predictions.csv`` dump via its confusion matrix."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no predictions")
    labels = [int(r["label"]) for r in rows]
    preds = [int(r["prediction"]) for r in rows]
    cm = confusion_matrix(labels, preds, max(labels + preds) + 1)
    return float(np.trace(cm) / cm.sum())
