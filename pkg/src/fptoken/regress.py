"""Small regression learners used by the verification backend.

Two regressors cover the fingerprint-prediction workload:

* NearestNeighborRegressor: inverse-distance-weighted k-NN.  The default
  predictor; exact on repeated argument vectors and cheap to train, which is
  what enrollment-time fitting per (device, feature) wants.
* RandomizedTreeEnsemble: fully randomized trees (random split feature,
  uniform random threshold), averaged.  Also runs as a binary classifier for
  the learned verifier.  Trees are stored as flat arrays so batch prediction
  is a vectorized descent, not per-sample recursion.

Both operate on plain float matrices; argument normalization is the
caller's business.
"""

from __future__ import annotations

import numpy as np


class NearestNeighborRegressor:
    """k nearest neighbors, weighted by inverse Euclidean distance.

    Queries that coincide with training points return the mean of the
    exactly-matching targets, so re-observations of an enrolled argument
    vector predict with zero structural error.
    """

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._x: np.ndarray | None = None
        self._y: np.ndarray | None = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "NearestNeighborRegressor":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("x must be (n, d) and y (n,) with matching n")
        if len(x) == 0:
            raise ValueError("empty training set")
        self._x = x
        self._y = y
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self._x is None or self._y is None:
            raise RuntimeError("predictor is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d2 = ((x[:, None, :] - self._x[None, :, :]) ** 2).sum(axis=2)
        k = min(self.k, len(self._x))
        idx = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(len(x))[:, None]
        dist = np.sqrt(d2[rows, idx])
        targets = self._y[idx]
        out = np.empty(len(x))
        exact = dist <= 1e-12
        has_exact = exact.any(axis=1)
        if has_exact.any():
            sums = np.where(exact, targets, 0.0).sum(axis=1)
            counts = exact.sum(axis=1)
            out[has_exact] = sums[has_exact] / counts[has_exact]
        rest = ~has_exact
        if rest.any():
            w = 1.0 / dist[rest]
            out[rest] = (w * targets[rest]).sum(axis=1) / w.sum(axis=1)
        return out


class RandomizedTreeEnsemble:
    """Averaged fully randomized trees; optional binary-classifier mode.

    Split selection draws a random feature and a uniform threshold between
    the node's min and max on that feature, retrying a few times when a draw
    would starve a child below min_samples_leaf.  No bootstrap: every tree
    sees the full training set and differs only through split randomness.
    """

    _RETRIES = 8
    _LEAF = -1

    def __init__(
        self,
        n_trees: int = 50,
        min_samples_leaf: int = 4,
        seed: int = 0,
        classifier: bool = False,
    ):
        if n_trees < 1 or min_samples_leaf < 1:
            raise ValueError("n_trees and min_samples_leaf must be >= 1")
        self.n_trees = n_trees
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self.classifier = classifier
        self._trees: list[tuple[np.ndarray, ...]] | None = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomizedTreeEnsemble":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("x must be (n, d) and y (n,) with matching n")
        if len(x) == 0:
            raise ValueError("empty training set")
        rng = np.random.default_rng(self.seed)
        self._trees = [self._grow(x, y, rng) for _ in range(self.n_trees)]
        return self

    def _grow(self, x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
        feat: list[int] = []
        thr: list[float] = []
        left: list[int] = []
        right: list[int] = []
        value: list[float] = []
        # stack of (node_index, member row indices); children are allocated
        # eagerly so the flat arrays never need back-patching of parents
        all_rows = np.arange(len(x))
        feat.append(self._LEAF); thr.append(0.0)
        left.append(self._LEAF); right.append(self._LEAF); value.append(0.0)
        stack = [(0, all_rows)]
        min_leaf = self.min_samples_leaf
        while stack:
            node, rows = stack.pop()
            ys = y[rows]
            if len(rows) < 2 * min_leaf or np.all(ys == ys[0]):
                value[node] = float(ys.mean())
                continue
            split = None
            for _ in range(self._RETRIES):
                f = int(rng.integers(x.shape[1]))
                col = x[rows, f]
                lo, hi = col.min(), col.max()
                if lo == hi:
                    continue
                t = float(rng.uniform(lo, hi))
                mask = col <= t
                n_left = int(mask.sum())
                if min_leaf <= n_left <= len(rows) - min_leaf:
                    split = (f, t, mask)
                    break
            if split is None:
                value[node] = float(ys.mean())
                continue
            f, t, mask = split
            li, ri = len(feat), len(feat) + 1
            for _ in range(2):
                feat.append(self._LEAF); thr.append(0.0)
                left.append(self._LEAF); right.append(self._LEAF); value.append(0.0)
            feat[node], thr[node] = f, t
            left[node], right[node] = li, ri
            stack.append((li, rows[mask]))
            stack.append((ri, rows[~mask]))
        return (
            np.array(feat, dtype=np.int32),
            np.array(thr, dtype=np.float64),
            np.array(left, dtype=np.int32),
            np.array(right, dtype=np.int32),
            np.array(value, dtype=np.float64),
        )

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Mean over trees of the reached leaf's training mean.

        In classifier mode this is the positive-class probability.
        """
        if self._trees is None:
            raise RuntimeError("ensemble is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        total = np.zeros(len(x))
        rows = np.arange(len(x))
        for feat, thr, left, right, value in self._trees:
            idx = np.zeros(len(x), dtype=np.int32)
            while True:
                internal = feat[idx] != self._LEAF
                if not internal.any():
                    break
                cur = idx[internal]
                go_left = x[rows[internal], feat[cur]] <= thr[cur]
                idx[internal] = np.where(go_left, left[cur], right[cur])
            total += value[idx]
        return total / self.n_trees

    def predict_label(self, x: np.ndarray) -> np.ndarray:
        if not self.classifier:
            raise RuntimeError("predict_label requires classifier mode")
        return (self.predict(x) >= 0.5).astype(np.int64)
