"""Gradient-boosted decision trees for binary classification.

Small from-scratch implementation used as the terminal-state classifier:
depth-limited regression trees fit to the logistic-loss gradient, with
Newton leaf values. Split search runs on per-feature quantile bins, and
prediction traverses all trees simultaneously on stacked node arrays so
batched inference stays cheap.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -40.0, 40.0)))


class _TreeBuilder:
    """Grows one regression tree on pre-binned features."""

    def __init__(self, xb, n_bins, max_depth, min_samples_leaf, reg_lambda):
        self.xb = xb                  # (n, d) uint8 bin indices
        self.n_bins = n_bins
        self.max_depth = max_depth
        self.min_leaf = min_samples_leaf
        self.reg = reg_lambda
        self.feature: list[int] = []
        self.bin_split: list[int] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def build(self, grad, hess):
        self._grow(np.arange(self.xb.shape[0]), grad, hess, 0)
        return self

    def _new_node(self):
        i = len(self.feature)
        self.feature.append(-1)
        self.bin_split.append(0)
        self.left.append(i)
        self.right.append(i)
        self.value.append(0.0)
        return i

    def _grow(self, idx, grad, hess, depth) -> int:
        node = self._new_node()
        g_sum = grad[idx].sum()
        h_sum = hess[idx].sum()
        self.value[node] = g_sum / (h_sum + self.reg)
        if depth >= self.max_depth or idx.size < 2 * self.min_leaf:
            return node

        best_gain = 1e-12
        best = None
        parent_score = g_sum * g_sum / (h_sum + self.reg)
        for f in range(self.xb.shape[1]):
            bins = self.xb[idx, f]
            gh = np.bincount(bins, weights=grad[idx], minlength=self.n_bins)
            hh = np.bincount(bins, weights=hess[idx], minlength=self.n_bins)
            nn = np.bincount(bins, minlength=self.n_bins)
            g_left = np.cumsum(gh)[:-1]
            h_left = np.cumsum(hh)[:-1]
            n_left = np.cumsum(nn)[:-1]
            g_right = g_sum - g_left
            h_right = h_sum - h_left
            n_right = idx.size - n_left
            ok = (n_left >= self.min_leaf) & (n_right >= self.min_leaf)
            if not ok.any():
                continue
            gain = (
                g_left**2 / (h_left + self.reg)
                + g_right**2 / (h_right + self.reg)
                - parent_score
            )
            gain[~ok] = -np.inf
            b = int(np.argmax(gain))
            if gain[b] > best_gain:
                best_gain = float(gain[b])
                best = (f, b)
        if best is None:
            return node

        f, b = best
        mask = self.xb[idx, f] <= b
        self.feature[node] = f
        self.bin_split[node] = b
        self.left[node] = self._grow(idx[mask], grad, hess, depth + 1)
        self.right[node] = self._grow(idx[~mask], grad, hess, depth + 1)
        return node


class GbdtClassifier:
    """Binary classifier: logistic loss, shrinkage, quantile-binned splits."""

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int = 3,
        learning_rate: float = 0.1,
        threshold: float = 0.5,
        n_bins: int = 64,
        min_samples_leaf: int = 5,
        reg_lambda: float = 1e-6,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.threshold = threshold
        self.n_bins = n_bins
        self.min_samples_leaf = min_samples_leaf
        self.reg_lambda = reg_lambda
        self._edges: list[np.ndarray] | None = None
        self._base: float = 0.0
        # stacked node tables, shape (n_trees, max_nodes)
        self._feat = None
        self._thr = None
        self._left = None
        self._right = None
        self._value = None

    # -- training ---------------------------------------------------------

    def _bin(self, x: np.ndarray) -> np.ndarray:
        xb = np.empty(x.shape, dtype=np.int16)
        for f, e in enumerate(self._edges):
            xb[:, f] = np.searchsorted(e, x[:, f], side="right")
        return xb

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GbdtClassifier":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError("x must be (n, d) with one label per row")
        classes = np.unique(y)
        if not np.array_equal(classes, [0.0, 1.0]):
            raise ValueError(
                "labels must contain both classes 0 and 1; "
                f"found {classes.tolist()}"
            )

        # quantile bin edges per feature (interior cut points)
        qs = np.linspace(0, 1, self.n_bins + 1)[1:-1]
        self._edges = []
        for f in range(x.shape[1]):
            e = np.unique(np.quantile(x[:, f], qs))
            self._edges.append(e)
        xb = self._bin(x)

        p0 = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        self._base = np.log(p0 / (1 - p0))
        score = np.full(y.shape, self._base)

        trees = []
        for _ in range(self.n_trees):
            p = _sigmoid(score)
            grad = y - p
            hess = np.maximum(p * (1 - p), 1e-12)
            tb = _TreeBuilder(
                xb, self.n_bins + 1, self.max_depth, self.min_samples_leaf, self.reg_lambda
            ).build(grad, hess)
            trees.append(tb)
            score += self.learning_rate * self._tree_scores(tb, xb)
        self._stack(trees)
        return self

    def _tree_scores(self, tb: _TreeBuilder, xb: np.ndarray) -> np.ndarray:
        idx = np.zeros(xb.shape[0], dtype=int)
        feat = np.array(tb.feature)
        bins = np.array(tb.bin_split)
        left = np.array(tb.left)
        right = np.array(tb.right)
        for _ in range(self.max_depth):
            f = feat[idx]
            internal = f >= 0
            go_left = np.zeros(xb.shape[0], dtype=bool)
            go_left[internal] = (
                xb[np.flatnonzero(internal), f[internal]] <= bins[idx[internal]]
            )
            idx = np.where(internal, np.where(go_left, left[idx], right[idx]), idx)
        return np.array(tb.value)[idx]

    def _stack(self, trees):
        max_nodes = max(len(t.feature) for t in trees)
        t_count = len(trees)
        self._feat = np.full((t_count, max_nodes), -1, dtype=int)
        self._thr = np.zeros((t_count, max_nodes))
        self._left = np.zeros((t_count, max_nodes), dtype=int)
        self._right = np.zeros((t_count, max_nodes), dtype=int)
        self._value = np.zeros((t_count, max_nodes))
        for k, t in enumerate(trees):
            n = len(t.feature)
            self._feat[k, :n] = t.feature
            self._left[k, :n] = t.left
            self._right[k, :n] = t.right
            self._value[k, :n] = t.value
            for i in range(n):
                f, b = t.feature[i], t.bin_split[i]
                if f >= 0:
                    e = self._edges[f]
                    # predicate x < thr reproduces "bin <= b" exactly
                    self._thr[k, i] = e[b] if b < e.size else np.inf

    # -- inference --------------------------------------------------------

    def decision_scores(self, x: np.ndarray) -> np.ndarray:
        if self._feat is None:
            raise RuntimeError("classifier is not fitted")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        t_count, max_nodes = self._feat.shape
        # flat node addressing: tree k node i -> k * max_nodes + i
        base = (np.arange(t_count) * max_nodes)[None, :]
        feat_f = self._feat.ravel()
        thr_f = self._thr.ravel()
        left_f = self._left.ravel()
        right_f = self._right.ravel()
        xf = x.ravel()
        row_off = (np.arange(n) * d)[:, None]

        idx = np.broadcast_to(base, (n, t_count)).copy()
        for _ in range(self.max_depth):
            f = feat_f[idx]
            internal = f >= 0
            xv = xf[row_off + np.maximum(f, 0)]
            go_left = internal & (xv < thr_f[idx])
            nxt = np.where(go_left, left_f[idx], right_f[idx]) + base
            idx = np.where(internal, nxt, idx)
        contrib = self._value.ravel()[idx]
        return self._base + self.learning_rate * contrib.sum(axis=1)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_scores(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x) >= self.threshold

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "threshold": self.threshold,
            "n_bins": self.n_bins,
            "min_samples_leaf": self.min_samples_leaf,
            "reg_lambda": self.reg_lambda,
            "base": self._base,
            "edges": [e.tolist() for e in self._edges],
            "feat": self._feat.tolist(),
            "thr": np.where(np.isfinite(self._thr), self._thr, 1e300).tolist(),
            "left": self._left.tolist(),
            "right": self._right.tolist(),
            "value": self._value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtClassifier":
        clf = cls(
            n_trees=d["n_trees"],
            max_depth=d["max_depth"],
            learning_rate=d["learning_rate"],
            threshold=d["threshold"],
            n_bins=d["n_bins"],
            min_samples_leaf=d["min_samples_leaf"],
            reg_lambda=d["reg_lambda"],
        )
        clf._base = d["base"]
        clf._edges = [np.array(e) for e in d["edges"]]
        clf._feat = np.array(d["feat"], dtype=int)
        thr = np.array(d["thr"])
        clf._thr = np.where(thr >= 1e299, np.inf, thr)
        clf._left = np.array(d["left"], dtype=int)
        clf._right = np.array(d["right"], dtype=int)
        clf._value = np.array(d["value"])
        return clf
