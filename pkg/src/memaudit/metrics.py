"""Evaluation primitives: AUC, thresholded precision/recall, layer-wise AUC."""

from typing import Optional

import numpy as np


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with ties counted as half.

    Equals the fraction of (positive, negative) pairs where the positive
    scores strictly higher, plus half the tied pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        # midrank, exact: ranks are 1-based, ties share the average rank
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def precision_recall(scores, labels, threshold: float):
    """Precision and recall when predicting positive at score >= threshold.

    Precision is None when nothing is predicted positive; recall is 0.0 when
    there are no actual positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall


def layerwise_auc(manifest, head, seed: int, fast: bool = False,
                  workers: int = 1, head_path: Optional[str] = None,
                  n_iter: int = 20):
    """Held-out AUC per layer tag, training one classifier per layer.

    The default mode reruns the full training pipeline on each layer's
    feature subset; fast mode skips the hyperparameter search and fits a
    fixed-configuration forest on the 80/20 split only.
    """
    from . import forest
    from .features import extract_matrix, filter_matrix
    from . import trace_io

    first = trace_io.read_trace(trace_io.resolve_trace_path(manifest, manifest.entries[0]))
    n_layers = first.dims.n_layers
    full = extract_matrix(manifest, head, workers=workers, head_path=head_path)
    out = []
    for tag in range(n_layers + 1):
        sub = filter_matrix(full, tag)
        if fast:
            score = forest.fixed_heldout_auc(sub, seed)
        else:
            _, report = forest.train_pipeline(sub, seed, n_iter=n_iter)
            score = report.heldout_auc
        out.append((tag, score))
    return out
