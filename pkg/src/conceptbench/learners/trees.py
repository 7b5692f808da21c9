"""Multiclass gradient-boosted regression trees on a softmax cross-entropy.

Each boosting round fits one depth-limited regression tree per class to the
Newton step of the softmax loss.  Splits are searched over per-feature
quantile bins, with histograms for all features of a tree level built by a
single ``np.bincount``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

_PRIOR_FLOOR = 1e-6


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows, np.where(inner, f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def to_nodes(self) -> list[dict]:
        return [
            {
                "id": i,
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "left": int(self.left[i]),
                "right": int(self.right[i]),
                "value": float(self.value[i]),
            }
            for i in range(len(self.feature))
        ]

    @classmethod
    def from_nodes(cls, nodes: list[dict]) -> "RegressionTree":
        def col(key, dtype):
            return np.array([n[key] for n in nodes], dtype=dtype)

        return cls(col("feature", np.int64), col("threshold", np.float64), col("left", np.int64),
                   col("right", np.int64), col("value", np.float64))


@dataclass
class TreeEnsemble:
    """Additive per-class scores; probabilities are their softmax."""

    n_classes: int
    n_features: int
    base_score: np.ndarray
    trees: list = field(default_factory=list)  # one dict {class: RegressionTree} per round
    learning_rate: float = 0.1
    max_depth: int = 4

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def decision_function(self, X: np.ndarray, n_rounds: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected features of shape (N, {self.n_features}), got {X.shape}")
        scores = np.tile(self.base_score, (len(X), 1))
        for round_trees in self.trees[:n_rounds]:
            for k, tree in round_trees.items():
                scores[:, k] += tree.predict(X)
        return scores

    def predict_proba(self, X, n_rounds: int | None = None) -> np.ndarray:
        return softmax(self.decision_function(X, n_rounds), axis=1)

    def to_dict(self) -> dict:
        return {
            "format": "conceptbench.tree_ensemble/1",
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "base_score": self.base_score.tolist(),
            "rounds": [{str(k): t.to_nodes() for k, t in r.items()} for r in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        trees = [{int(k): RegressionTree.from_nodes(v) for k, v in r.items()} for r in d["rounds"]]
        return cls(d["n_classes"], d["n_features"], np.asarray(d["base_score"], dtype=np.float64),
                   trees, d["learning_rate"], d["max_depth"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(s))


def _bin_edges(X: np.ndarray, max_bins: int) -> np.ndarray:
    """Candidate thresholds per feature, padded with +inf to ``max_bins - 1``."""
    n_features = X.shape[1]
    edges = np.full((n_features, max_bins - 1), np.inf)
    qs = np.linspace(0.0, 1.0, max_bins + 1)
    for f in range(n_features):
        uniq = np.unique(X[:, f])
        if len(uniq) > max_bins:
            uniq = np.unique(np.quantile(X[:, f], qs, method="nearest"))
        mids = 0.5 * (uniq[:-1] + uniq[1:])[: max_bins - 1]
        edges[f, : len(mids)] = mids
    return edges


def _bin(X: np.ndarray, edges: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.int64)
    for f in range(X.shape[1]):
        out[:, f] = np.searchsorted(edges[f], X[:, f], side="left")
    return out


def _grow_tree(base_key, edges, g, h, max_depth, n_bins, reg_lambda, min_child_weight, lr):
    """Grow one tree; returns it with its predictions on the training rows.

    ``base_key`` is ``feature * n_bins + bin`` for every (row, feature).
    """
    n, d = base_key.shape
    stride = d * n_bins
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    fitted = np.empty(n)
    rows = np.arange(n)
    node_of = np.zeros(n, dtype=np.int64)  # position within the current level
    level = [0]  # tree ids of the current level
    level_G = [g.sum()]
    level_H = [h.sum()]

    def close(j, tid, members):
        value[tid] = -lr * level_G[j] / (level_H[j] + reg_lambda)
        fitted[members] = value[tid]

    for depth in range(max_depth + 1):
        m = len(level)
        if depth == max_depth:
            for j, tid in enumerate(level):
                close(j, tid, rows[node_of == j])
            break
        key = (base_key + (node_of * stride)[:, None]).ravel()
        G = np.bincount(key, weights=np.repeat(g, d), minlength=m * stride).reshape(m, d, n_bins)
        H = np.bincount(key, weights=np.repeat(h, d), minlength=m * stride).reshape(m, d, n_bins)
        GL = np.cumsum(G, axis=2)[:, :, :-1]
        HL = np.cumsum(H, axis=2)[:, :, :-1]
        Gt = np.asarray(level_G)[:, None, None]
        Ht = np.asarray(level_H)[:, None, None]
        GR, HR = Gt - GL, Ht - HL
        gain = GL**2 / (HL + reg_lambda) + GR**2 / (HR + reg_lambda) - Gt**2 / (Ht + reg_lambda)
        # hessians are floored above zero, so the weight test also rules out empty children
        ok = (HL >= min_child_weight) & (HR >= min_child_weight)
        gain = np.where(ok, gain, -np.inf).reshape(m, -1)
        best = np.argmax(gain, axis=1)
        best_gain = gain[np.arange(m), best]

        next_level, next_G, next_H = [], [], []
        remap = np.full(m, -1, dtype=np.int64)
        split_feat = np.zeros(m, dtype=np.int64)
        split_bin = np.zeros(m, dtype=np.int64)
        for j, tid in enumerate(level):
            # zero-gain splits are kept: symmetric problems such as XOR only
            # become separable one level further down
            if not best_gain[j] > -1e-12:
                close(j, tid, rows[node_of == j])
                continue
            f, b = divmod(int(best[j]), n_bins - 1)
            feature[tid], threshold[tid] = f, float(edges[f, b])
            for gg, hh in ((GL[j, f, b], HL[j, f, b]), (GR[j, f, b], HR[j, f, b])):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
                next_G.append(gg)
                next_H.append(hh)
            left[tid], right[tid] = len(feature) - 2, len(feature) - 1
            remap[j] = len(next_level)
            next_level += [left[tid], right[tid]]
            split_feat[j], split_bin[j] = f, b
        if not next_level:
            break
        active = remap[node_of] >= 0
        nj = node_of[active]
        base_key, g, h, rows = base_key[active], g[active], h[active], rows[active]
        goes_right = base_key[np.arange(len(nj)), split_feat[nj]] - split_feat[nj] * n_bins > split_bin[nj]
        node_of = remap[nj] + goes_right
        level, level_G, level_H = next_level, next_G, next_H

    tree = RegressionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                          np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                          np.asarray(value))
    return tree, fitted


def fit_tree_ensemble(features, labels, max_depth: int = 4, n_rounds: int = 100, lr: float = 0.1,
                      *, n_classes: int | None = None, max_bins: int = 64, reg_lambda: float = 1.0,
                      min_child_weight: float = 1e-3) -> TreeEnsemble:
    """Boost ``n_rounds`` rounds of per-class trees on softmax cross-entropy.

    A single observed class yields a constant predictor.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (N, D) with one label per row")
    if len(X) < 2:
        raise ValueError("need at least two samples")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    prior = np.maximum(counts / counts.sum(), _PRIOR_FLOOR)
    base = np.log(prior) - np.log(prior).mean()
    ens = TreeEnsemble(n_classes, X.shape[1], base, [], lr, max_depth)
    observed = np.flatnonzero(counts > 0)
    if len(observed) < 2:
        return ens

    edges = _bin_edges(X, max_bins)
    base_key = _bin(X, edges) + np.arange(X.shape[1], dtype=np.int64)[None, :] * max_bins
    onehot = np.eye(n_classes)[y]
    scores = np.tile(base, (len(X), 1))
    for _ in range(n_rounds):
        p = softmax(scores, axis=1)
        round_trees = {}
        for k in observed:
            g = p[:, k] - onehot[:, k]
            h = np.maximum(p[:, k] * (1.0 - p[:, k]), 1e-12)
            tree, fitted = _grow_tree(base_key, edges, g, h, max_depth, max_bins, reg_lambda,
                                      min_child_weight, lr)
            round_trees[int(k)] = tree
            scores[:, k] += fitted
        ens.trees.append(round_trees)
    return ens


def ensemble_predict(ens: TreeEnsemble, features) -> np.ndarray:
    """Class probabilities, rows summing to one."""
    return ens.predict_proba(features)


def log_loss(ens: TreeEnsemble, features, labels, n_rounds: int | None = None) -> float:
    y = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(ens.decision_function(features, n_rounds), axis=1)
    return float(-lp[np.arange(len(y)), y].mean())


class GradientBoostedTrees(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_tree_ensemble`."""

    def __init__(self, max_depth=4, n_estimators=100, learning_rate=0.1, n_classes=None,
                 max_bins=64, reg_lambda=1.0, min_child_weight=1e-3):
        self.max_depth = max_depth
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.n_classes = n_classes
        self.max_bins = max_bins
        self.reg_lambda = reg_lambda
        self.min_child_weight = min_child_weight

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.ensemble_ = fit_tree_ensemble(
            X, y, self.max_depth, self.n_estimators, self.learning_rate,
            n_classes=self.n_classes, max_bins=self.max_bins, reg_lambda=self.reg_lambda,
            min_child_weight=self.min_child_weight)
        self.classes_ = np.arange(self.ensemble_.n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict_proba(check_array(X, dtype=np.float64))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
