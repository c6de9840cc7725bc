"""CART, random forest and logistic gradient boosting on dense float matrices.

All three are deterministic for a fixed seed.  Split search is exact: every
midpoint between consecutive distinct values of every candidate feature is
scored, and ties go to the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-12


@dataclass
class Node:
    value: float  # positive-class fraction (classification) or leaf output (regression)
    n_samples: int
    impurity: float
    feature: int = -1
    threshold: float = math.nan
    left: Optional["Node"] = None
    right: Optional["Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float  # decrease in total (count-weighted) impurity


def gini(y: np.ndarray) -> float:
    n = len(y)
    if n == 0:
        return 0.0
    p = y.mean()
    return 2.0 * p * (1.0 - p)


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    features: Optional[np.ndarray] = None,
    criterion: str = "gini",
    min_samples_leaf: int = 1,
) -> Optional[Split]:
    """Exhaustive best split of one node.

    ``gain`` is ``n * impurity(node) - n_l * impurity(left) - n_r * impurity(right)``,
    i.e. the impurity decrease weighted by sample counts.  Zero-gain cuts are
    admissible (XOR needs one at the root); None means no admissible cut.
    """
    n, p = X.shape
    if n < 2 * min_samples_leaf:
        return None
    features = np.arange(p) if features is None else np.sort(features)
    y = y.astype(float)
    if criterion == "gini":
        parent = n * gini(y)
    else:
        parent = float(((y - y.mean()) ** 2).sum())
    best: Optional[Split] = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        # candidate cut after position i (left = [0, i])
        distinct = np.nonzero(xs[1:] > xs[:-1])[0]
        if distinct.size == 0:
            continue
        n_left = distinct + 1
        keep = (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        distinct, n_left = distinct[keep], n_left[keep]
        if distinct.size == 0:
            continue
        n_right = n - n_left
        csum = np.cumsum(ys)
        s_left = csum[distinct]
        s_right = csum[-1] - s_left
        if criterion == "gini":
            # n_l * gini_l = 2 * s_l * (n_l - s_l) / n_l
            child = 2.0 * s_left * (n_left - s_left) / n_left + 2.0 * s_right * (n_right - s_right) / n_right
        else:
            csq = np.cumsum(ys * ys)
            q_left = csq[distinct]
            q_right = csq[-1] - q_left
            child = (q_left - s_left ** 2 / n_left) + (q_right - s_right ** 2 / n_right)
        gains = parent - child
        # lowest threshold among gains equal up to rounding
        i = int(np.nonzero(gains >= gains.max() - EPS)[0][0])
        gain = max(0.0, float(gains[i]))
        if best is None or gain > best.gain + EPS:
            thr = 0.5 * (xs[distinct[i]] + xs[distinct[i] + 1])
            best = Split(int(f), float(thr), gain)
    return best


class _TreeBase:
    criterion = "gini"

    def __init__(self, max_depth: Optional[int] = None, min_samples_leaf: int = 1,
                 max_features: Optional[int] = None, seed: int = 0):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.seed = seed
        self.root: Optional[Node] = None
        self.n_features = 0
        self._importance: Optional[np.ndarray] = None

    def _leaf_value(self, y: np.ndarray) -> float:
        return float(y.mean())

    def _impurity(self, y: np.ndarray) -> float:
        if self.criterion == "gini":
            return gini(y)
        return float(y.var()) if len(y) else 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> "_TreeBase":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
            raise ValueError("X must be (n, p) with n == len(y) > 0")
        self.n_features = X.shape[1]
        self._n_total = len(y)
        self._rng = np.random.default_rng(self.seed)
        self._importance = np.zeros(self.n_features)
        self.root = self._grow(X, y, 0)
        return self

    def _candidates(self) -> Optional[np.ndarray]:
        if self.max_features is None or self.max_features >= self.n_features:
            return None
        return self._rng.choice(self.n_features, size=self.max_features, replace=False)

    def _grow(self, X: np.ndarray, y: np.ndarray, depth: int) -> Node:
        node = Node(self._leaf_value(y), len(y), self._impurity(y))
        if (self.max_depth is not None and depth >= self.max_depth) or node.impurity <= EPS:
            return node
        split = best_split(X, y, self._candidates(), self.criterion, self.min_samples_leaf)
        if split is None:
            return node
        mask = X[:, split.feature] <= split.threshold
        node.feature, node.threshold = split.feature, split.threshold
        self._importance[split.feature] += split.gain / self._n_total
        node.left = self._grow(X[mask], y[mask], depth + 1)
        node.right = self._grow(X[~mask], y[~mask], depth + 1)
        return node

    def _leaf_values(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty(len(X))
        for i, x in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if x[node.feature] <= node.threshold else node.right
            out[i] = node.value
        return out

    @property
    def raw_importances(self) -> np.ndarray:
        """Unnormalized total impurity decrease per feature (fraction of root samples weighted)."""
        return self._importance.copy()

    @property
    def feature_importances(self) -> np.ndarray:
        return normalize_importance(self._importance)

    def depth(self) -> int:
        def d(node):
            return 0 if node.is_leaf else 1 + max(d(node.left), d(node.right))
        return d(self.root)

    def used_features(self) -> set[int]:
        out, stack = set(), [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                out.add(node.feature)
                stack.extend([node.left, node.right])
        return out


def normalize_importance(raw: np.ndarray) -> np.ndarray:
    total = raw.sum()
    return raw / total if total > 0 else np.zeros_like(raw)


class DecisionTreeClassifier(_TreeBase):
    """Binary CART with Gini impurity; ``predict_proba`` is the leaf's positive fraction."""

    criterion = "gini"

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self._leaf_values(X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)


class RegressionTree(_TreeBase):
    criterion = "mse"

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._leaf_values(X)


def default_max_features(p: int) -> int:
    return max(1, int(math.sqrt(p)))


class RandomForestClassifier:
    """Bagged CART with per-split feature subsampling.

    The score is the fraction of trees voting positive.
    """

    def __init__(self, n_trees: int = 100, max_depth: Optional[int] = None, min_samples_leaf: int = 1,
                 max_features: Optional[int] = -1, bootstrap: bool = True, seed: int = 0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features  # -1: sqrt(p); None: all features
        self.bootstrap = bootstrap
        self.seed = seed
        self.trees: list[DecisionTreeClassifier] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RandomForestClassifier":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n, p = X.shape
        mf = default_max_features(p) if self.max_features == -1 else self.max_features
        rng = np.random.default_rng(self.seed)
        self.n_features = p
        self.trees = []
        for _ in range(self.n_trees):
            idx = rng.integers(0, n, n) if self.bootstrap else np.arange(n)
            tree = DecisionTreeClassifier(self.max_depth, self.min_samples_leaf, mf, int(rng.integers(2**31)))
            self.trees.append(tree.fit(X[idx], y[idx]))
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        votes = np.stack([t.predict(X) for t in self.trees])
        return votes.mean(axis=0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    @property
    def raw_importances(self) -> np.ndarray:
        return np.mean([normalize_importance(t.raw_importances) for t in self.trees], axis=0)

    @property
    def feature_importances(self) -> np.ndarray:
        return normalize_importance(self.raw_importances)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(y: np.ndarray, margin: np.ndarray) -> float:
    # mean of log(1 + exp(-s * margin)) with s = +-1, computed stably
    s = np.where(np.asarray(y) > 0.5, 1.0, -1.0)
    return float(np.mean(np.logaddexp(0.0, -s * margin)))


class GradientBoostingClassifier:
    """Stagewise logistic-loss boosting with shrinkage.

    Each round fits a regression tree to the residual ``y - p`` and adds
    ``learning_rate`` times its leaf means to the margin.  Without row
    subsampling and with learning rates up to 1 no round increases the
    training loss (its curvature is at most 1/4, so each leaf step descends).
    """

    def __init__(self, n_trees: int = 100, learning_rate: float = 0.1, max_depth: int = 3,
                 min_samples_leaf: int = 1, subsample: float = 1.0, seed: int = 0):
        if not 0 < learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.subsample = subsample
        self.seed = seed
        self.trees: list[RegressionTree] = []
        self.init_margin = 0.0
        self.train_loss: list[float] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GradientBoostingClassifier":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n, p = X.shape
        self.n_features = p
        prior = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        self.init_margin = math.log(prior / (1 - prior))
        margin = np.full(n, self.init_margin)
        rng = np.random.default_rng(self.seed)
        self.trees = []
        self.train_loss = [logistic_loss(y, margin)]
        for _ in range(self.n_trees):
            residual = y - sigmoid(margin)
            if self.subsample < 1.0:
                idx = np.sort(rng.choice(n, size=max(2, int(self.subsample * n)), replace=False))
            else:
                idx = np.arange(n)
            tree = RegressionTree(self.max_depth, self.min_samples_leaf, None, 0).fit(X[idx], residual[idx])
            self.trees.append(tree)
            margin = margin + self.learning_rate * tree.predict(X)
            self.train_loss.append(logistic_loss(y, margin))
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        margin = np.full(len(X), self.init_margin)
        for tree in self.trees:
            margin += self.learning_rate * tree.predict(X)
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    @property
    def raw_importances(self) -> np.ndarray:
        if not self.trees:
            return np.zeros(self.n_features)
        return np.sum([t.raw_importances for t in self.trees], axis=0)

    @property
    def feature_importances(self) -> np.ndarray:
        return normalize_importance(self.raw_importances)
