"""Windowed quantile prediction for nonconformity score series.

The primary regressor is a quantile random forest: trees are grown on
seeded bootstrap resamples of (lagged-window, next-score) pairs, split by
exhaustive variance-reduction search, and keep the raw target values in
their leaves.  A prediction pools the leaf samples the input window lands
in across all trees and takes an order-statistic quantile of the pool.  A
rolling empirical quantile of the scores serves as the fallback for cold
starts and as a cheap baseline.

Tree growth is compiled with numba: the sequential evaluation loop refits
the forest at every test step, so the builder has to be fast on small
sample counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from graphcp.exceptions import InputError, InsufficientDataError

__all__ = [
    "ScoreSeries",
    "WindowedPairs",
    "ForestConfig",
    "QuantilePredictor",
    "conformal_quantile",
    "make_windows",
    "fit_forest",
    "fit_empirical",
    "predict_quantile",
]

FOREST = "forest"
EMPIRICAL = "empirical"


class ScoreSeries:
    """Time-ordered nonnegative scores plus the window length used on them."""

    def __init__(self, scores=None, window: int = 10):
        if window < 1:
            raise InputError(f"window must be >= 1, got {window}")
        self.window = int(window)
        self._scores: list[float] = [float(s) for s in (scores if scores is not None else [])]

    def append(self, value: float) -> None:
        self._scores.append(float(value))

    def values(self) -> np.ndarray:
        return np.asarray(self._scores, dtype=float)

    def tail_window(self) -> np.ndarray:
        """The most recent ``window`` scores (the next prediction's features)."""
        if len(self._scores) < self.window:
            raise InsufficientDataError(
                f"need {self.window} scores for a window, have {len(self._scores)}"
            )
        return np.asarray(self._scores[-self.window:], dtype=float)

    def __len__(self) -> int:
        return len(self._scores)


@dataclass(frozen=True)
class WindowedPairs:
    """Lagged feature windows and the score that followed each of them."""

    features: np.ndarray  # (num_pairs, window)
    targets: np.ndarray   # (num_pairs,)

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def window(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ForestConfig:
    """Quantile-forest hyperparameters.

    ``max_depth=0`` degenerates every tree to a single leaf holding all its
    samples.  ``bootstrap=False`` grows each tree on the full pair set
    instead of a resample.
    """

    num_trees: int = 25
    max_depth: int = 2
    min_leaf: int = 5
    bootstrap_fraction: float = 1.0
    bootstrap: bool = True
    seed: int = 0


@njit(cache=True)
def _grow_tree(xt, y, max_depth, min_leaf):  # pragma: no cover - compiled
    """Regression tree via exhaustive variance-reduction split search.

    ``xt`` is the feature matrix transposed to (d, n).  Each feature is
    argsorted once up front; every level is then a single pass over the
    presorted orders with per-node running sums, so a level costs O(n * d)
    regardless of how many nodes it holds.  Leaves own contiguous segments
    of the returned index permutation, which is how raw leaf targets stay
    recoverable without per-leaf storage.
    """
    d, n = xt.shape
    sorted_idx = np.empty((d, n), np.int64)
    for f in range(d):
        sorted_idx[f] = np.argsort(xt[f])

    max_nodes = 2 * n + 2
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)

    node_of = np.zeros(n, np.int64)
    cnt = np.zeros(max_nodes, np.int64)
    tot1 = np.zeros(max_nodes, np.float64)
    tot2 = np.zeros(max_nodes, np.float64)
    active = np.zeros(max_nodes, np.uint8)
    best_sse = np.zeros(max_nodes, np.float64)
    best_f = np.full(max_nodes, -1, np.int64)
    best_thr = np.zeros(max_nodes, np.float64)
    run1 = np.zeros(max_nodes, np.float64)
    run2 = np.zeros(max_nodes, np.float64)
    runc = np.zeros(max_nodes, np.int64)
    prev_val = np.zeros(max_nodes, np.float64)

    cnt[0] = n
    for i in range(n):
        tot1[0] += y[i]
        tot2[0] += y[i] * y[i]

    frontier = np.zeros(max_nodes, np.int64)
    new_frontier = np.zeros(max_nodes, np.int64)
    n_frontier = 1
    next_node = 1
    depth = 0

    while n_frontier > 0 and depth < max_depth:
        any_active = False
        for q in range(n_frontier):
            v = frontier[q]
            if cnt[v] >= 2 * min_leaf:
                active[v] = 1
                best_sse[v] = np.inf
                best_f[v] = -1
                any_active = True
            else:
                active[v] = 0
        if not any_active:
            break

        for f in range(d):
            for q in range(n_frontier):
                v = frontier[q]
                run1[v] = 0.0
                run2[v] = 0.0
                runc[v] = 0
            for pos in range(n):
                s = sorted_idx[f, pos]
                v = node_of[s]
                if active[v] == 0:
                    continue
                val = xt[f, s]
                c_left = runc[v]
                if c_left > 0 and prev_val[v] < val:
                    c_right = cnt[v] - c_left
                    if c_left >= min_leaf and c_right >= min_leaf:
                        r1 = tot1[v] - run1[v]
                        r2 = tot2[v] - run2[v]
                        sse = (run2[v] - run1[v] * run1[v] / c_left) + (
                            r2 - r1 * r1 / c_right
                        )
                        if sse < best_sse[v]:
                            best_sse[v] = sse
                            best_f[v] = f
                            best_thr[v] = 0.5 * (prev_val[v] + val)
                yv = y[s]
                run1[v] += yv
                run2[v] += yv * yv
                runc[v] += 1
                prev_val[v] = val

        for q in range(n_frontier):
            v = frontier[q]
            if active[v] == 1 and best_f[v] >= 0:
                feature[v] = best_f[v]
                threshold[v] = best_thr[v]
                left[v] = next_node
                right[v] = next_node + 1
                next_node += 2

        for s in range(n):
            v = node_of[s]
            if active[v] == 1 and feature[v] >= 0:
                if xt[feature[v], s] <= threshold[v]:
                    child = left[v]
                else:
                    child = right[v]
                node_of[s] = child
                cnt[child] += 1
                tot1[child] += y[s]
                tot2[child] += y[s] * y[s]

        new_nf = 0
        for q in range(n_frontier):
            v = frontier[q]
            if active[v] == 1 and feature[v] >= 0:
                new_frontier[new_nf] = left[v]
                new_frontier[new_nf + 1] = right[v]
                new_nf += 2
        for q in range(new_nf):
            frontier[q] = new_frontier[q]
        n_frontier = new_nf
        depth += 1

    # group samples into contiguous leaf segments
    seg_start = np.zeros(next_node, np.int64)
    seg_end = np.zeros(next_node, np.int64)
    leaf_count = np.zeros(next_node, np.int64)
    for s in range(n):
        leaf_count[node_of[s]] += 1
    offset = 0
    for v in range(next_node):
        seg_start[v] = offset
        offset += leaf_count[v]
        seg_end[v] = offset
    fill = seg_start.copy()
    idx = np.empty(n, np.int64)
    for s in range(n):
        v = node_of[s]
        idx[fill[v]] = s
        fill[v] += 1

    return (
        feature[:next_node],
        threshold[:next_node],
        left[:next_node],
        right[:next_node],
        seg_start,
        seg_end,
        idx,
    )


@dataclass(frozen=True)
class _FittedTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    seg_start: np.ndarray
    seg_end: np.ndarray
    targets_perm: np.ndarray  # bootstrap targets permuted into leaf segments

    def leaf_targets(self, window: np.ndarray) -> np.ndarray:
        node = 0
        while self.feature[node] >= 0:
            if window[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return self.targets_perm[self.seg_start[node]:self.seg_end[node]]


@dataclass(frozen=True)
class QuantilePredictor:
    """A fitted quantile estimator of the next nonconformity score."""

    kind: str
    alpha: float
    window: int | None = None
    trees: tuple[_FittedTree, ...] = ()
    empirical_scores: np.ndarray | None = field(default=None, repr=False)


def conformal_quantile(values: np.ndarray, level: float) -> float:
    """Order statistic at index ceil(level * (m + 1)), clamped to [1, m].

    This is the split-conformal convention: slightly conservative for
    finite samples and exactly the empirical quantile in the limit.
    """
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m == 0:
        raise InsufficientDataError("cannot take a quantile of zero values")
    idx = math.ceil(level * (m + 1))
    idx = min(max(idx, 1), m)
    return float(np.sort(values)[idx - 1])


def make_windows(series: ScoreSeries) -> WindowedPairs:
    """All (window, next score) pairs of the series, chronologically ordered."""
    w = series.window
    s = series.values()
    if s.shape[0] < w + 1:
        raise InsufficientDataError(
            f"need at least {w + 1} scores to window, have {s.shape[0]}"
        )
    features = sliding_window_view(s, w)[:-1].copy()
    targets = s[w:].copy()
    return WindowedPairs(features=features, targets=targets)


def _fit_one_tree(
    x: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator
) -> _FittedTree:
    n = y.shape[0]
    if cfg.bootstrap:
        size = max(1, int(round(cfg.bootstrap_fraction * n)))
        rows = rng.integers(0, n, size=size)
        xb, yb = x[rows], y[rows]
    else:
        xb, yb = x, y
    feature, threshold, left, right, seg_start, seg_end, idx = _grow_tree(
        np.ascontiguousarray(xb.T, dtype=np.float64),
        np.ascontiguousarray(yb, dtype=np.float64),
        cfg.max_depth,
        cfg.min_leaf,
    )
    return _FittedTree(
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        seg_start=seg_start,
        seg_end=seg_end,
        targets_perm=yb[idx],
    )


def fit_forest(
    pairs: WindowedPairs, alpha: float, cfg: ForestConfig | None = None
) -> QuantilePredictor:
    """Fit the quantile random forest on windowed score pairs."""
    if not (0.0 < alpha < 1.0):
        raise InputError(f"alpha must be in (0, 1), got {alpha}")
    if len(pairs) == 0:
        raise InsufficientDataError("no pairs to fit the forest on")
    cfg = cfg or ForestConfig()
    if cfg.num_trees < 1:
        raise InputError(f"num_trees must be >= 1, got {cfg.num_trees}")
    if cfg.max_depth < 0:
        raise InputError(f"max_depth must be >= 0, got {cfg.max_depth}")
    if cfg.min_leaf < 1:
        raise InputError(f"min_leaf must be >= 1, got {cfg.min_leaf}")
    rng = np.random.default_rng(cfg.seed)
    trees = tuple(
        _fit_one_tree(pairs.features, pairs.targets, cfg, rng)
        for _ in range(cfg.num_trees)
    )
    return QuantilePredictor(
        kind=FOREST, alpha=alpha, window=pairs.window, trees=trees
    )


def fit_empirical(
    series: ScoreSeries, alpha: float, capacity: int | None = None
) -> QuantilePredictor:
    """Fallback predictor: the conformal order statistic of recent scores.

    Uses the last min(len, capacity) scores and ignores the feature window
    entirely.
    """
    if not (0.0 < alpha < 1.0):
        raise InputError(f"alpha must be in (0, 1), got {alpha}")
    s = series.values()
    if s.shape[0] == 0:
        raise InsufficientDataError("cannot fit an empirical quantile on no scores")
    if capacity is not None:
        s = s[-capacity:]
    return QuantilePredictor(
        kind=EMPIRICAL, alpha=alpha, window=series.window, empirical_scores=s.copy()
    )


def predict_quantile(
    p: QuantilePredictor, window: np.ndarray | None = None, alpha: float | None = None
) -> float:
    """Predict the (1 - alpha) quantile of the next score; clamped at 0.

    ``alpha`` overrides the level the predictor was fitted with; the fitted
    state (trees or stored scores) is reused, only the order statistic
    changes.
    """
    level = 1.0 - (p.alpha if alpha is None else alpha)
    if p.kind == EMPIRICAL:
        return max(0.0, conformal_quantile(p.empirical_scores, level))
    if window is None:
        raise InputError("forest prediction requires a feature window")
    window = np.asarray(window, dtype=float)
    if window.shape != (p.window,):
        raise InputError(
            f"window has shape {window.shape}, forest expects ({p.window},)"
        )
    pooled = np.concatenate([t.leaf_targets(window) for t in p.trees])
    return max(0.0, conformal_quantile(pooled, level))
