"""CART-style binary trees stored as flat node arrays.

A tree is an (n_nodes, 5) float64 array with columns
[feature, threshold, left, right, value]; feature == -1 marks a leaf and
indices are exact in float64. The flat form serializes directly and needs
no recursion to evaluate.

Split thresholds sit at midpoints of consecutive sorted distinct values.
A row goes left when x[feature] < threshold. Ties on impurity break toward
the lowest feature index, then the smallest threshold.
"""

from __future__ import annotations

import math

import numpy as np

COL_FEATURE, COL_THRESHOLD, COL_LEFT, COL_RIGHT, COL_VALUE = range(5)
LEAF = -1.0


def _candidate_splits(values: np.ndarray, min_leaf: int):
    """Valid (threshold, left_size) pairs for one feature, ascending.

    left_size counts rows with value < threshold. Candidates whose float
    midpoint collapses onto the lower value are dropped: they cannot
    represent the intended cut.
    """
    order = np.argsort(values, kind="stable")
    sv = values[order]
    n = len(sv)
    cuts = np.flatnonzero(sv[1:] != sv[:-1]) + 1
    if len(cuts) == 0:
        return order, np.empty(0), np.empty(0, dtype=np.int64)
    thresholds = (sv[cuts - 1] + sv[cuts]) / 2.0
    ok = (thresholds > sv[cuts - 1]) & (cuts >= min_leaf) & (n - cuts >= min_leaf)
    return order, thresholds[ok], cuts[ok]


def _best_split_gini(X: np.ndarray, y: np.ndarray, features: np.ndarray, min_leaf: int):
    """Minimize weighted Gini over midpoint splits of the given features."""
    n = len(y)
    total_ones = int(y.sum())
    best = None  # (score, feature, threshold, left_mask)
    for f in features:
        order, thresholds, cuts = _candidate_splits(X[:, f], min_leaf)
        if len(cuts) == 0:
            continue
        ones_prefix = np.cumsum(y[order])
        left_n = cuts.astype(np.float64)
        left_ones = ones_prefix[cuts - 1].astype(np.float64)
        right_n = n - left_n
        right_ones = total_ones - left_ones
        p_l = left_ones / left_n
        p_r = right_ones / right_n
        weighted = (left_n * 2.0 * p_l * (1.0 - p_l) + right_n * 2.0 * p_r * (1.0 - p_r)) / n
        i = int(np.argmin(weighted))  # first minimum = smallest threshold
        if best is None or weighted[i] < best[0] - 1e-15:
            best = (float(weighted[i]), int(f), float(thresholds[i]), None)
    if best is None:
        return None
    score, f, t, _ = best
    return f, t


def _best_split_sse(X: np.ndarray, y: np.ndarray, features: np.ndarray, min_leaf: int):
    """Minimize summed squared error around side means."""
    n = len(y)
    total_sum = float(y.sum())
    total_sq = float((y * y).sum())
    best = None
    for f in features:
        order, thresholds, cuts = _candidate_splits(X[:, f], min_leaf)
        if len(cuts) == 0:
            continue
        ys = y[order]
        sum_prefix = np.cumsum(ys)
        sq_prefix = np.cumsum(ys * ys)
        left_n = cuts.astype(np.float64)
        left_sum = sum_prefix[cuts - 1]
        left_sq = sq_prefix[cuts - 1]
        right_n = n - left_n
        right_sum = total_sum - left_sum
        right_sq = total_sq - left_sq
        sse = (left_sq - left_sum * left_sum / left_n) + (right_sq - right_sum * right_sum / right_n)
        i = int(np.argmin(sse))
        if best is None or sse[i] < best[0] - 1e-15:
            best = (float(sse[i]), int(f), float(thresholds[i]))
    if best is None:
        return None
    _, f, t = best
    return f, t


def grow_tree(X: np.ndarray, y: np.ndarray, *, task: str, max_depth: int,
              min_samples_leaf: int = 1, n_features_per_split: int | None = None,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Grow a tree on (X, y); task is "gini" (y in {0,1}, leaf = class-1
    fraction) or "sse" (real y, leaf = mean).

    n_features_per_split < d samples a fresh feature subset at every split
    (requires rng); features are searched in ascending index order either way.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    if n_features_per_split is None:
        n_features_per_split = d
    find_split = _best_split_gini if task == "gini" else _best_split_sse

    nodes: list[list[float]] = []

    def leaf_value(idx: np.ndarray) -> float:
        return float(y[idx].mean())

    def is_pure(idx: np.ndarray) -> bool:
        yv = y[idx]
        return bool((yv == yv[0]).all())

    def build(idx: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        nodes.append([LEAF, 0.0, LEAF, LEAF, leaf_value(idx)])
        if depth >= max_depth or len(idx) < 2 * min_samples_leaf or is_pure(idx):
            return node_id
        if n_features_per_split >= d:
            features = np.arange(d)
        else:
            features = np.sort(rng.choice(d, size=n_features_per_split, replace=False))
        split = find_split(X[idx], y[idx], features, min_samples_leaf)
        if split is None:
            return node_id
        f, t = split
        go_left = X[idx, f] < t
        left_id = build(idx[go_left], depth + 1)
        right_id = build(idx[~go_left], depth + 1)
        nodes[node_id][COL_FEATURE] = float(f)
        nodes[node_id][COL_THRESHOLD] = t
        nodes[node_id][COL_LEFT] = float(left_id)
        nodes[node_id][COL_RIGHT] = float(right_id)
        return node_id

    build(np.arange(len(y)), 0)
    return np.asarray(nodes, dtype=np.float64)


def predict_tree(nodes: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate the tree on every row of X; returns leaf values."""
    feat = nodes[:, COL_FEATURE].astype(np.int64)
    thr = nodes[:, COL_THRESHOLD]
    left = nodes[:, COL_LEFT].astype(np.int64)
    right = nodes[:, COL_RIGHT].astype(np.int64)
    val = nodes[:, COL_VALUE]

    idx = np.zeros(len(X), dtype=np.int64)
    active = feat[idx] >= 0
    while active.any():
        where = np.flatnonzero(active)
        cur = idx[where]
        f = feat[cur]
        go_left = X[where, f] < thr[cur]
        idx[where] = np.where(go_left, left[cur], right[cur])
        active = feat[idx] >= 0
    return val[idx]


def tree_features_used(nodes: np.ndarray) -> set[int]:
    feats = nodes[:, COL_FEATURE]
    return {int(f) for f in feats if f >= 0}


def sqrt_feature_count(d: int) -> int:
    return int(math.ceil(math.sqrt(d)))
