"""
Exact greedy binary tree grower shared by the classifiers and the boosting
regressor.

Rows are presorted once per feature; each node keeps, per feature, the
sorted list of its own rows, and children inherit their share of that list
by a stable boolean partition, so no node ever re-sorts. Candidate
thresholds are midpoints between consecutive distinct values inside the
node. Row multiplicities (bootstrap counts, subsample indicators) enter as
`counts`; rows with count 0 never reach the tree.

Criteria, both maximized over (feature, position):
  gini  sum_k L_k^2 / W_L + sum_k R_k^2 / W_R   (stats = weighted one-hot)
        which equals W - (W_L gini_L + W_R gini_R)
  mse   G_L^2 / W_L + G_R^2 / W_R               (stats = [w*r, w])
Ties go to the lowest feature index, then the lowest threshold.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

GINI = "gini"
MSE = "mse"

# Upper bound on gathered stats elements per feature block.
_BLOCK_BUDGET = 2_000_000


@dataclass
class Tree:
    feature: np.ndarray      # int32, -1 marks a leaf
    threshold: np.ndarray    # float64, x <= threshold goes left
    left: np.ndarray         # int32
    right: np.ndarray        # int32
    value: np.ndarray        # float64 (n_nodes, n_outputs)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            nd = node[active]
            internal = self.feature[nd] >= 0
            active = active[internal]
            if not active.size:
                break
            nd = nd[internal]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def gini_impurity(class_weights: np.ndarray) -> float:
    total = float(np.sum(class_weights))
    if total <= 0:
        return 0.0
    p = np.asarray(class_weights, dtype=np.float64) / total
    return float(1.0 - np.sum(p * p))


def presort(X: np.ndarray) -> np.ndarray:
    """(d, n) row indices, each line sorted by one feature."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int32))


def resolve_candidates(setting, d: int) -> int:
    if setting in (None, "all"):
        return d
    if setting == "sqrt":
        return max(1, int(np.sqrt(d)))
    if setting == "log2":
        return max(1, int(np.log2(d)) if d > 1 else 1)
    return max(1, min(int(setting), d))


def _best_split(X, orders, feats, stats, counts, criterion, min_leaf):
    m = orders.shape[1]
    c = stats.shape[1]
    best = (-np.inf, -1, 0.0)
    block = max(1, min(len(feats), _BLOCK_BUDGET // max(1, m * c)))
    for b0 in range(0, len(feats), block):
        fb = feats[b0:b0 + block]
        ob = orders[fb]                                  # (b, m)
        xs = X[ob, fb[:, None]]                          # (b, m)
        cs = np.cumsum(stats[ob], axis=1)                # (b, m, c)
        cc = np.cumsum(counts[ob], axis=1)               # (b, m)
        L = cs[:, :-1]
        R = cs[:, -1:] - L
        nl = cc[:, :-1]
        nr = cc[:, -1:] - nl
        valid = (xs[:, 1:] > xs[:, :-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            if criterion == GINI:
                wl = L.sum(axis=2)
                wr = R.sum(axis=2)
                score = (L * L).sum(axis=2) / wl + (R * R).sum(axis=2) / wr
            else:
                wl = L[:, :, 1]
                wr = R[:, :, 1]
                score = L[:, :, 0] ** 2 / wl + R[:, :, 0] ** 2 / wr
        valid &= (wl > 0) & (wr > 0)
        score = np.where(valid, score, -np.inf)
        j = int(np.argmax(score))                        # row-major: feature, then position
        fi, pos = divmod(j, m - 1)
        if score[fi, pos] > best[0]:
            lo, hi = xs[fi, pos], xs[fi, pos + 1]
            thr = (lo + hi) / 2.0
            if thr >= hi:
                thr = lo
            best = (float(score[fi, pos]), int(fb[fi]), float(thr))
    return best


def grow_tree(
    X: np.ndarray,
    order: np.ndarray,
    stats: np.ndarray,
    counts: np.ndarray,
    criterion: str,
    max_depth: int,
    min_samples_leaf: int,
    n_candidates: int,
    rng: Optional[np.random.Generator] = None,
    leaf_value: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tree:
    """
    Grow one tree depth-first.

    X        (n, d) features
    order    (d, n) output of presort(X)
    stats    (n, c) per-row sufficient statistics for the criterion
    counts   (n,) row multiplicities; 0 drops the row
    leaf_value(rows) -> (n_outputs,) value for a node; defaults to the
    normalized stats sum (class probabilities for gini).
    """
    n, d = X.shape
    counts = np.asarray(counts)
    active = counts > 0
    if not active.all():
        m = int(active.sum())
        order = order[active[order]].reshape(d, m)
    if leaf_value is None:
        def leaf_value(rows):
            s = stats[rows].sum(axis=0)
            tot = s.sum()
            return s / tot if tot > 0 else s
    rng = rng or np.random.default_rng(0)
    all_feats = np.arange(d)

    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [None]
    goes_left = np.zeros(n, dtype=bool)
    stack = [(0, order, 0)]
    while stack:
        node, orders, depth = stack.pop()
        rows = orders[0]
        value[node] = np.asarray(leaf_value(rows), dtype=np.float64)
        m = rows.shape[0]
        n_rows = int(counts[rows].sum())
        if depth >= max_depth or m < 2 or n_rows < 2 * min_samples_leaf:
            continue
        s = stats[rows].sum(axis=0)
        if criterion == GINI:
            if np.count_nonzero(s > 0) <= 1:
                continue
        else:
            w = stats[rows, 1]
            r = stats[rows, 0][w > 0] / w[w > 0]
            if r.size == 0 or np.ptp(r) <= 1e-12 * max(1.0, float(np.abs(r).max())):
                continue
        if n_candidates >= d:
            feats = all_feats
        else:
            feats = np.sort(rng.choice(d, size=n_candidates, replace=False))
        score, f, thr = _best_split(X, orders, feats, stats, counts, criterion, min_samples_leaf)
        if f < 0:
            continue

        goes_left[rows] = X[rows, f] <= thr
        mask = goes_left[orders]
        n_left = int(mask[0].sum())
        left_orders = orders[mask].reshape(d, n_left)
        right_orders = orders[~mask].reshape(d, m - n_left)

        li, ri = len(feature), len(feature) + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(None)
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        stack.append((ri, right_orders, depth + 1))
        stack.append((li, left_orders, depth + 1))

    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.vstack(value).astype(np.float64),
    )
