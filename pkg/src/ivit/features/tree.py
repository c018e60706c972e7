"""CART classification tree with Gini impurity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from ..numerics import ContractError

_GAIN_TOL = 1e-12


@dataclass
class Node:
    prediction: int  # index into classes
    feature: int = -1
    threshold: float = 0.0
    left: Node | None = None
    right: Node | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict[str, Any]:
        if self.is_leaf:
            return {"prediction": self.prediction}
        return {
            "prediction": self.prediction,
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Node:
        if "left" not in d:
            return cls(int(d["prediction"]))
        return cls(
            int(d["prediction"]),
            int(d["feature"]),
            float(d["threshold"]),
            cls.from_dict(d["left"]),
            cls.from_dict(d["right"]),
        )


def _gini(counts: np.ndarray) -> np.ndarray:
    total = counts.sum(axis=-1)
    safe = np.where(total > 0, total, 1)
    p = counts / safe[..., None]
    return 1.0 - (p * p).sum(axis=-1)


class DecisionTree:
    """Binary CART classifier.

    Splits send ``x[feature] <= threshold`` left, with thresholds at
    midpoints between consecutive distinct values.  Among equal-gain splits
    the lowest feature index, then the lowest threshold, wins.  Zero-gain
    splits are still taken while a node is impure, so XOR-like data can be
    separated.  Leaves predict the majority class, ties going to the
    smallest class label.
    """

    def __init__(self, max_depth: int | None = None):
        if max_depth is not None and max_depth < 0:
            raise ContractError(f"max_depth must be >= 0, got {max_depth}")
        self.max_depth = max_depth
        self.classes_: np.ndarray | None = None
        self.root: Node | None = None

    def fit(self, X, y) -> DecisionTree:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or len(X) != len(y):
            raise ContractError(f"fit needs X [n, d] and y [n], got {X.shape}, {y.shape}")
        if len(y) < 2:
            raise ContractError("fit needs at least 2 samples")
        self.classes_, yi = np.unique(y, return_inverse=True)
        self.root = self._grow(X, yi, 0)
        return self

    def _grow(self, X: np.ndarray, y: np.ndarray, depth: int) -> Node:
        k = len(self.classes_)
        counts = np.bincount(y, minlength=k)
        node = Node(int(np.argmax(counts)))
        if np.count_nonzero(counts) <= 1:
            return node
        if self.max_depth is not None and depth >= self.max_depth:
            return node
        split = self._best_split(X, y, counts)
        if split is None:
            return node
        node.feature, node.threshold = split
        go_left = X[:, node.feature] <= node.threshold
        node.left = self._grow(X[go_left], y[go_left], depth + 1)
        node.right = self._grow(X[~go_left], y[~go_left], depth + 1)
        return node

    def _best_split(self, X, y, counts):
        n, d = X.shape
        k = len(counts)
        parent = _gini(counts)
        best_gain, best = -np.inf, None
        onehot = np.eye(k, dtype=np.int64)[y]
        for f in range(d):
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            left = np.cumsum(onehot[order], axis=0)[:-1]
            cut = np.flatnonzero(xs[1:] > xs[:-1])
            if cut.size == 0:
                continue
            lc = left[cut]
            rc = counts - lc
            nl = lc.sum(axis=1)
            gain = parent - (nl * _gini(lc) + (n - nl) * _gini(rc)) / n
            i = int(np.argmax(gain))  # first maximum -> lowest threshold
            if gain[i] > best_gain + _GAIN_TOL:
                best_gain = gain[i]
                best = (f, float((xs[cut[i]] + xs[cut[i] + 1]) / 2.0))
        return best

    def _predict_index(self, X: np.ndarray) -> np.ndarray:
        if self.root is None:
            raise ContractError("tree is not fitted")
        out = np.empty(len(X), dtype=np.int64)
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.prediction
        return out

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.classes_[self._predict_index(X.reshape(len(X), -1))]

    def depth(self) -> int:
        def walk(node):
            return 0 if node.is_leaf else 1 + max(walk(node.left), walk(node.right))

        return walk(self.root)

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_depth": self.max_depth,
            "classes": self.classes_.tolist(),
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DecisionTree:
        tree = cls(d.get("max_depth"))
        tree.classes_ = np.asarray(d["classes"])
        tree.root = Node.from_dict(d["root"])
        return tree


def decision_tree_fit(X, y, max_depth: int | None = None) -> DecisionTree:
    return DecisionTree(max_depth).fit(X, y)


def decision_tree_predict(model: DecisionTree, X) -> np.ndarray:
    return model.predict(X)
