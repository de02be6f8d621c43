"""Pair verification with a swept distance threshold."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def best_threshold_accuracy(distances, same) -> tuple[float, float]:
    """Accuracy-maximizing threshold over midpoints of the sorted distances.

    A pair is declared "same" when its distance is at most the threshold.
    Returns ``(accuracy, threshold)``; among equally good thresholds the
    smallest wins.
    """
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if d.size == 0:
        raise ConfigError("pair list is empty")
    order = np.argsort(d, kind="stable")
    ds, ss = d[order], same[order]
    n = len(ds)
    # cut i: the first i sorted pairs are predicted "same"
    same_before = np.concatenate([[0], np.cumsum(ss)])
    diff_after = np.concatenate([[0], np.cumsum(~ss)])[-1] - np.concatenate([[0], np.cumsum(~ss)])
    correct = same_before + diff_after
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = ds[1:] > ds[:-1]  # a cut inside a run of equal distances is not realizable
    correct = np.where(valid, correct, -1)
    i = int(np.argmax(correct))
    if i == 0:
        thr = ds[0] - 1.0
    elif i == n:
        thr = ds[-1] + 1.0
    else:
        thr = (ds[i - 1] + ds[i]) / 2.0
    return float(correct[i] / n), float(thr)
