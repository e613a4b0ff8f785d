"""CART, random forest and first/second-order gradient boosting on sparse rows.

Split search is exact: the candidate thresholds of a feature are midpoints
between consecutive distinct values present in the node, and a row goes left
iff ``x[feature] < threshold`` (absent sparse entries read as 0).  Ties in
gain go to the lowest feature index, then the lowest threshold.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError

log = logging.getLogger(__name__)

GINI = "gini_classification"
NEWTON = "newton_regression"
FIRST_ORDER = "first_order"
SECOND_ORDER = "second_order"
WARN_SINGLE_CLASS = "single_class_labels"
MODEL_FORMAT = "dischargepred.trees"
MODEL_VERSION = 1

# relative tolerance under which two split gains count as tied
GAIN_TIE_RTOL = 1e-10
_MIN_NEWTON_GAIN = 1e-12
_DENSE_CHUNK = 8192


@dataclass
class TreeFitParams:
    max_depth: int | None = None
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    features_per_split: int | float | str | None = None
    subsample: float = 1.0
    n_trees: int = 100
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    bootstrap: bool = True
    seed: int = 0

    def validate(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1 or self.min_samples_split < 2:
            raise ValueError("min_samples_leaf must be >= 1 and min_samples_split >= 2")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")
        fps = self.features_per_split
        if isinstance(fps, float) and not 0.0 < fps <= 1.0:
            raise ValueError("fractional features_per_split must lie in (0, 1]")
        if isinstance(fps, int) and not isinstance(fps, bool) and fps < 1:
            raise ValueError("features_per_split must be >= 1")
        if isinstance(fps, str) and fps != "sqrt":
            raise ValueError("features_per_split string must be 'sqrt'")
        return self

    def n_split_features(self, width: int) -> int:
        fps = self.features_per_split
        if fps is None:
            return width
        if fps == "sqrt":
            return max(1, math.ceil(math.sqrt(width)))
        if isinstance(fps, float):
            return max(1, min(width, math.ceil(fps * width)))
        return min(width, int(fps))


@dataclass
class Tree:
    """Flattened binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each dense row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] < self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


def _as_csr(rows) -> sp.csr_matrix:
    if sp.issparse(rows):
        X = sp.csr_matrix(rows, dtype=np.float64, copy=True)
    else:
        X = sp.csr_matrix(np.atleast_2d(np.asarray(rows, dtype=np.float64)))
    X.sum_duplicates()
    X.eliminate_zeros()
    X.sort_indices()
    return X


class BinnedRows:
    """Sparse rows with every stored entry mapped to its (feature, distinct value) key.

    Keys are laid out feature by feature, values ascending inside a feature,
    so a sorted run of keys walks candidate thresholds in tie-break order.
    """

    def __init__(self, rows):
        X = _as_csr(rows)
        self.n, self.d = X.shape
        self.indptr = X.indptr.astype(np.int64)
        self.indices = X.indices.astype(np.int64)
        self.data = X.data
        csc = X.tocsc()
        csc.sort_indices()
        bins, offsets = [], np.zeros(self.d + 1, dtype=np.int64)
        zero_key = np.full(self.d, -1, dtype=np.int64)
        csc_keys = np.empty(csc.nnz, dtype=np.int64)
        for f in range(self.d):
            a, b = csc.indptr[f], csc.indptr[f + 1]
            vals = csc.data[a:b]
            u = np.unique(vals)
            if b - a < self.n:
                u = np.unique(np.concatenate([u, [0.0]]))
            bins.append(u)
            offsets[f + 1] = offsets[f] + len(u)
            csc_keys[a:b] = offsets[f] + np.searchsorted(u, vals)
            if b - a < self.n:
                zero_key[f] = offsets[f] + np.searchsorted(u, 0.0)
        # carry keys back to CSR entry order through a sparse matrix of (key + 1)
        keyed = sp.csc_matrix((csc_keys.astype(np.float64) + 1.0, csc.indices, csc.indptr), shape=csc.shape).tocsr()
        keyed.sort_indices()
        self.entry_key = keyed.data.astype(np.int64) - 1
        self.zero_key = zero_key
        self.offsets = offsets
        self.total_bins = int(offsets[-1])
        self.bin_value = np.concatenate(bins) if bins else np.zeros(0)
        self.key_feature = np.repeat(np.arange(self.d), np.diff(offsets))
        self._dense = None

    def dense(self) -> np.ndarray:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.d)).toarray()

    def dense_view(self) -> np.ndarray:
        """Cached dense copy used to route rows at split time."""
        if self._dense is None:
            self._dense = self.dense()
        return self._dense


@dataclass
class _Split:
    feature: int
    threshold: float
    gain: float


@dataclass
class _Hist:
    """Per-key sums (row count, s1, s2) of one node, zero bins included.

    ``dense`` keeps full-length arrays (reusable for sibling subtraction);
    otherwise ``keys`` lists the present keys in ascending order.
    """

    keys: np.ndarray
    cnt: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    dense: bool

    def present(self):
        if not self.dense:
            return self.keys, self.cnt, self.s1, self.s2
        k = np.flatnonzero(self.cnt > 0.5)
        return k, self.cnt[k], self.s1[k], self.s2[k]

    def minus(self, other: "_Hist") -> "_Hist":
        return _Hist(self.keys, self.cnt - other.cnt, self.s1 - other.s1, self.s2 - other.s2, True)


def _gather_entries(B: BinnedRows, rows):
    starts = B.indptr[rows]
    counts = B.indptr[rows + 1] - starts
    total = int(counts.sum())
    local = np.repeat(np.arange(len(rows)), counts)
    first = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return local, first + np.arange(total)


def _n_entries(B, rows) -> int:
    return int((B.indptr[rows + 1] - B.indptr[rows]).sum())


def _node_hist(B, rows, s1, s2, dense: bool) -> _Hist:
    local, pos = _gather_entries(B, rows)
    keys = B.entry_key[pos]
    members = rows[local]
    w1, w2 = s1[members], s2[members]
    m, t1, t2 = float(len(rows)), s1[rows].sum(), s2[rows].sum()
    if dense:
        T = B.total_bins
        cnt = np.bincount(keys, minlength=T).astype(np.float64)
        a = np.bincount(keys, weights=w1, minlength=T)
        b = np.bincount(keys, weights=w2, minlength=T)
        # no zero value is ever stored, so a zero bin holds whatever the explicit entries leave over
        has = B.zero_key >= 0
        zk = B.zero_key[has]
        starts = B.offsets[:-1]
        cnt[zk] = m - np.add.reduceat(cnt, starts)[has]
        a[zk] = t1 - np.add.reduceat(a, starts)[has]
        b[zk] = t2 - np.add.reduceat(b, starts)[has]
        return _Hist(np.arange(T), cnt, a, b, True)
    uk, inv = np.unique(keys, return_inverse=True)
    cnt = np.bincount(inv, minlength=len(uk)).astype(np.float64)
    a = np.bincount(inv, weights=w1, minlength=len(uk))
    b = np.bincount(inv, weights=w2, minlength=len(uk))
    kf = B.key_feature[uk]
    fc = np.bincount(kf, weights=cnt, minlength=B.d)
    zmask = (B.zero_key >= 0) & (fc < m - 0.5)
    zf = np.flatnonzero(zmask)
    keys_all = np.concatenate([uk, B.zero_key[zf]])
    order = np.argsort(keys_all, kind="stable")
    cnt = np.concatenate([cnt, m - fc[zf]])[order]
    a = np.concatenate([a, t1 - np.bincount(kf, weights=a, minlength=B.d)[zf]])[order]
    b = np.concatenate([b, t2 - np.bincount(kf, weights=b, minlength=B.d)[zf]])[order]
    return _Hist(keys_all[order], cnt, a, b, False)


def _split_gains(mode, left, total, reg_lambda):
    """Gain of each candidate from its left-side sums (cnt, s1, s2) and node totals."""
    right = total[None, :] - left
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == GINI:
            def score(s):
                w, p = s[..., 1], s[..., 2]
                return (p * p + (w - p) ** 2) / w

            gain = score(left) + score(right) - score(total[None, :])
        else:
            def score(s):
                g, h = s[..., 1], s[..., 2]
                return g * g / (h + reg_lambda)

            gain = 0.5 * (score(left) + score(right) - score(total[None, :]))
    return np.where(np.isfinite(gain), gain, -np.inf)


def pick_best(gains):
    """Index of the winning candidate: max gain, ties to the earliest index."""
    best = gains.max()
    tol = GAIN_TIE_RTOL * max(1.0, abs(best))
    return int(np.flatnonzero(gains >= best - tol)[0])


def _best_split(B, hist: _Hist, total, fmask, mode, min_leaf, reg_lambda):
    """Best split over the features allowed by ``fmask`` (None = all)."""
    uk, cnt, a, b = hist.present()
    kf = B.key_feature[uk]
    if fmask is not None:
        sel = fmask[kf]
        uk, cnt, a, b, kf = uk[sel], cnt[sel], a[sel], b[sel], kf[sel]
    if len(uk) < 2:
        return None
    agg = np.column_stack([cnt, a, b])
    cs = np.cumsum(agg, axis=0)
    same_next = kf[:-1] == kf[1:]
    # cumulative sums restart at each feature's first key
    first_of_feature = np.concatenate([[True], ~same_next])
    base_idx = np.maximum.accumulate(np.where(first_of_feature, np.arange(len(uk)), 0))
    before = np.where(base_idx[:, None] > 0, cs[np.maximum(base_idx - 1, 0)], 0.0)
    left = (cs - before)[:-1]
    cand = same_next & (left[:, 0] >= min_leaf - 0.5) & (total[0] - left[:, 0] >= min_leaf - 0.5)
    if not cand.any():
        return None
    ci = np.flatnonzero(cand)
    gains = _split_gains(mode, left[ci], total, reg_lambda)
    if not np.isfinite(gains).any():
        return None
    k = ci[pick_best(gains)]
    lo, hi = B.bin_value[uk[k]], B.bin_value[uk[k + 1]]
    thr = 0.5 * (lo + hi)
    if not lo < thr:
        thr = hi
    return _Split(int(kf[k]), float(thr), float(gains.max()))


def _leaf_value(mode, total, reg_lambda):
    if mode == GINI:
        return total[2] / total[1] if total[1] > 0 else 0.0
    return -total[1] / (total[2] + reg_lambda) if total[2] + reg_lambda > 0 else 0.0


def _grow(B, rows, s1, s2, mode, params, rng, reg_lambda, collect_leaves=False):
    """Grow one tree over ``rows`` (duplicates allowed) of a BinnedRows."""
    n_feat = params.n_split_features(B.d)
    min_leaf = params.min_samples_leaf
    Xd = B.dense_view()
    dense_cut = max(B.total_bins // 4, 1)
    feature, threshold, left, right, value = [], [], [], [], []
    leaves = {}

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.asarray(rows, dtype=np.int64), 0, None)]
    while stack:
        node, idx, depth, hist = stack.pop()
        m = len(idx)
        total = np.array([float(m), s1[idx].sum(), s2[idx].sum()])
        value[node] = float(_leaf_value(mode, total, reg_lambda))

        stop = (
            (params.max_depth is not None and depth >= params.max_depth)
            or m < params.min_samples_split
            or m < 2 * min_leaf
            or (mode == GINI and (total[2] <= 0 or total[2] >= total[1]))
        )
        split = None
        if not stop:
            if hist is None:
                hist = _node_hist(B, idx, s1, s2, _n_entries(B, idx) > dense_cut)
            if n_feat >= B.d:
                split = _best_split(B, hist, total, None, mode, min_leaf, reg_lambda)
            else:
                # draw feature blocks without replacement until one yields a valid split
                perm = rng.permutation(B.d)
                for start in range(0, B.d, n_feat):
                    fmask = np.zeros(B.d, dtype=bool)
                    fmask[perm[start:start + n_feat]] = True
                    split = _best_split(B, hist, total, fmask, mode, min_leaf, reg_lambda)
                    if split is not None:
                        break
            if split is not None and mode == NEWTON and not split.gain > _MIN_NEWTON_GAIN:
                split = None
        if split is None:
            if collect_leaves:
                leaves[node] = idx
            continue

        go_left = Xd[idx, split.feature] < split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        lidx, ridx = idx[go_left], idx[~go_left]
        lhist = rhist = None
        if hist.dense and max(_n_entries(B, lidx), _n_entries(B, ridx)) > dense_cut:
            # build the smaller child directly and the larger one by subtraction
            if len(lidx) <= len(ridx):
                lhist = _node_hist(B, lidx, s1, s2, True)
                rhist = hist.minus(lhist)
            else:
                rhist = _node_hist(B, ridx, s1, s2, True)
                lhist = hist.minus(rhist)
        # push right first so the left subtree is numbered first
        stack.append((rnode, ridx, depth + 1, rhist))
        stack.append((lnode, lidx, depth + 1, lhist))

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )
    return (tree, leaves) if collect_leaves else tree



def fit_cart(rows, targets, weights=None, mode: str = GINI, params: TreeFitParams | None = None, rng=None,
             hessians=None, reg_lambda: float = 0.0) -> Tree:
    """Fit one tree.

    ``gini_classification``: ``targets`` are 0/1 labels, ``weights`` sample
    weights; leaves hold the weighted positive fraction.
    ``newton_regression``: ``targets`` are per-row gradients and ``hessians``
    the matching second derivatives (``weights`` scales both); leaves hold
    ``-G / (H + reg_lambda)``.
    """
    params = (params or TreeFitParams(bootstrap=False)).validate()
    B = rows if isinstance(rows, BinnedRows) else BinnedRows(rows)
    if B.n == 0:
        raise DataError("fit_cart needs at least one row")
    t = np.asarray(targets, dtype=np.float64)
    if len(t) != B.n:
        raise DataError(f"targets length {len(t)} != rows {B.n}")
    w = np.ones(B.n) if weights is None else np.asarray(weights, dtype=np.float64)
    if mode == GINI:
        s1, s2 = w, w * t
    elif mode == NEWTON:
        h = np.ones(B.n) if hessians is None else np.asarray(hessians, dtype=np.float64)
        s1, s2 = w * t, w * h
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    return _grow(B, np.arange(B.n), s1, s2, mode, params, rng, reg_lambda)


# ---------------------------------------------------------------- ensembles


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_odds(p):
    return math.log(p / (1.0 - p))


def _dense_chunks(X, width):
    if isinstance(X, BinnedRows):
        X = sp.csr_matrix((X.data, X.indices, X.indptr), shape=(X.n, X.d))
    if not sp.issparse(X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != width:
        raise DataError(f"row width {X.shape[1]} does not match model width {width}")
    for a in range(0, X.shape[0], _DENSE_CHUNK):
        chunk = X[a:a + _DENSE_CHUNK]
        yield np.asarray(chunk.toarray() if sp.issparse(chunk) else chunk, dtype=np.float64)


@dataclass
class ForestModel:
    trees: list
    params: TreeFitParams
    width: int

    def predict_proba(self, X) -> np.ndarray:
        out = []
        for chunk in _dense_chunks(X, self.width):
            acc = np.zeros(chunk.shape[0])
            for t in self.trees:
                acc += t.predict(chunk)
            out.append(acc / len(self.trees) if self.trees else np.full(chunk.shape[0], 0.5))
        return np.concatenate(out) if out else np.zeros(0)


@dataclass
class BoostedModel:
    base_score: float
    trees: list
    learning_rate: float
    variant: str
    params: TreeFitParams
    width: int
    reg_lambda: float = 0.0
    warnings: list = field(default_factory=list)

    def margin(self, X) -> np.ndarray:
        out = []
        for chunk in _dense_chunks(X, self.width):
            acc = np.zeros(chunk.shape[0])
            for t in self.trees:
                acc += t.predict(chunk)
            out.append(self.base_score + self.learning_rate * acc)
        return np.concatenate(out) if out else np.zeros(0)

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.margin(X))


def predict_proba(model, rows) -> np.ndarray:
    """Probabilities for dense/sparse rows or a single SparseVector."""
    if hasattr(rows, "indices") and hasattr(rows, "width") and not sp.issparse(rows):
        rows = sp.csr_matrix((rows.values, rows.indices, [0, len(rows.indices)]), shape=(1, rows.width))
    return model.predict_proba(rows)


def _fit_one_forest_tree(B, y, params, seed, t):
    rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
    rows = rng.integers(0, B.n, size=B.n) if params.bootstrap else np.arange(B.n)
    ones = np.ones(B.n)
    return _grow(B, rows, ones, y, GINI, params, rng, 0.0)


def fit_random_forest(rows, labels, params: TreeFitParams | None = None, seed: int | None = None,
                      n_jobs: int = 1) -> ForestModel:
    """Bagged Gini trees; each tree gets its own seed substream, so ``n_jobs`` never changes the result."""
    params = params or TreeFitParams(features_per_split="sqrt", min_samples_leaf=1)
    params.validate()
    seed = params.seed if seed is None else seed
    B = rows if isinstance(rows, BinnedRows) else BinnedRows(rows)
    if B.n == 0:
        raise DataError("empty training set")
    y = np.asarray(labels, dtype=np.float64)
    if n_jobs == 1 or params.n_trees < 2:
        trees = [_fit_one_forest_tree(B, y, params, seed, t) for t in range(params.n_trees)]
    else:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs)(delayed(_fit_one_forest_tree)(B, y, params, seed, t)
                                        for t in range(params.n_trees))
    return ForestModel(trees=trees, params=params, width=B.d)


def _check_labels(y):
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0/1")


def _boost_setup(rows, labels, params, variant):
    B = rows if isinstance(rows, BinnedRows) else BinnedRows(rows)
    if B.n == 0:
        raise DataError("empty training set")
    y = np.asarray(labels, dtype=np.float64)
    if len(y) != B.n:
        raise DataError("labels length does not match rows")
    _check_labels(y)
    prev = float(y.mean())
    warnings = []
    if prev in (0.0, 1.0):
        log.warning("%s boosting: single-class labels, returning base-score model", variant)
        warnings.append(WARN_SINGLE_CLASS)
        prev = min(max(prev, 1e-6), 1 - 1e-6)
    return B, y, _log_odds(prev), warnings


def log_loss(y, p) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def _subsample(rng, n, frac):
    if frac >= 1.0:
        return np.arange(n)
    k = max(1, int(round(frac * n)))
    return np.sort(rng.choice(n, size=k, replace=False))


def fit_gbm_first_order(rows, labels, params: TreeFitParams | None = None, seed: int | None = None,
                        callback=None) -> BoostedModel:
    """Functional gradient descent on log-loss.

    Each round fits a squared-error tree to the residuals ``y - p`` on a fresh
    subsample, then sets every leaf to one Newton step over its members.
    """
    params = params or TreeFitParams(n_trees=500, subsample=0.8, max_depth=50, min_samples_leaf=3,
                                     learning_rate=0.1)
    params.validate()
    seed = params.seed if seed is None else seed
    B, y, base, warnings = _boost_setup(rows, labels, params, FIRST_ORDER)
    model = BoostedModel(base, [], params.learning_rate, FIRST_ORDER, params, B.d, 0.0, warnings)
    if warnings:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    Xd = B.dense_view()
    margin = np.full(B.n, base)
    for r in range(params.n_trees):
        p = _sigmoid(margin)
        resid = y - p
        sample = _subsample(rng, B.n, params.subsample)
        tree, leaves = _grow(B, sample, -resid, np.ones(B.n), NEWTON, params, rng, 0.0, collect_leaves=True)
        for node, members in leaves.items():
            num = resid[members].sum()
            den = (p[members] * (1 - p[members])).sum()
            tree.value[node] = num / den if den > 1e-150 else 0.0
        margin += params.learning_rate * tree.predict(Xd)
        model.trees.append(tree)
        if callback is not None:
            callback(r, y, _sigmoid(margin))
    return model


def fit_gbm_second_order(rows, labels, params: TreeFitParams | None = None, seed: int | None = None,
                         callback=None) -> BoostedModel:
    """Newton boosting: per-row gradient ``p - y`` and hessian ``p(1 - p)``,
    leaves ``-G / (H + reg_lambda)``."""
    params = params or TreeFitParams(n_trees=2000, min_samples_leaf=2, learning_rate=0.3, max_depth=6,
                                     reg_lambda=1.0)
    params.validate()
    seed = params.seed if seed is None else seed
    B, y, base, warnings = _boost_setup(rows, labels, params, SECOND_ORDER)
    model = BoostedModel(base, [], params.learning_rate, SECOND_ORDER, params, B.d, params.reg_lambda, warnings)
    if warnings:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    Xd = B.dense_view()
    margin = np.full(B.n, base)
    for r in range(params.n_trees):
        p = _sigmoid(margin)
        sample = _subsample(rng, B.n, params.subsample)
        tree = _grow(B, sample, p - y, p * (1 - p), NEWTON, params, rng, params.reg_lambda)
        margin += params.learning_rate * tree.predict(Xd)
        model.trees.append(tree)
        if callback is not None:
            callback(r, y, _sigmoid(margin))
    return model


# ---------------------------------------------------------------- persistence


def _params_dict(params: TreeFitParams) -> dict:
    return asdict(params)


def model_to_json(model) -> str:
    if isinstance(model, ForestModel):
        body = {"kind": "forest", "variant": "random_forest", "base_score": None, "learning_rate": None,
                "reg_lambda": None, "warnings": []}
    else:
        body = {"kind": "boosted", "variant": model.variant, "base_score": model.base_score,
                "learning_rate": model.learning_rate, "reg_lambda": model.reg_lambda,
                "warnings": list(model.warnings)}
    body.update({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": _params_dict(model.params),
        "width": model.width,
        "trees": [t.to_dict() for t in model.trees],
    })
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise DataError("not a tree model file of a supported version")
    params = TreeFitParams(**d["params"])
    trees = [Tree.from_dict(t) for t in d["trees"]]
    if d["kind"] == "forest":
        return ForestModel(trees=trees, params=params, width=d["width"])
    return BoostedModel(base_score=d["base_score"], trees=trees, learning_rate=d["learning_rate"],
                        variant=d["variant"], params=params, width=d["width"], reg_lambda=d["reg_lambda"],
                        warnings=d["warnings"])
