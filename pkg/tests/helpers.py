"""Independent reference implementations used as test oracles.

These are deliberately naive (loops, direct formulas) and share no code
with the package beyond its public data types.
"""
from __future__ import annotations

import numpy as np

from dischargepred.cohort import Encounter
from dischargepred.features import SEQUENCE_CHANNELS, DaySequence
from dischargepred.timeutil import DAY, HOUR

# ---------------------------------------------------------------- metrics


def concordance_auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def brute_auprc(scores, labels) -> float:
    """Interpolated AUPRC by direct enumeration of thresholds and recall levels."""
    n_pos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        points.append((tp / n_pos, tp / (tp + fp)))
    levels = sorted({r for r, _ in points if r > 0})
    area, prev = 0.0, 0.0
    for r in levels:
        p_interp = max(p for rr, p in points if rr >= r)
        area += (r - prev) * p_interp
        prev = r
    return area


def random_scored(rng, n_max=200):
    """Random (scores, labels) with both classes and deliberate ties."""
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    pool = rng.random(max(1, int(rng.integers(1, n + 1))))
    scores = np.round(rng.choice(pool, n), int(rng.integers(1, 4)))
    return scores, labels


# ---------------------------------------------------------------- trees


def split_candidates(x):
    """Midpoint thresholds between consecutive distinct values, ascending."""
    u = np.unique(x)
    out = []
    for lo, hi in zip(u[:-1], u[1:]):
        t = 0.5 * (lo + hi)
        out.append(t if lo < t else hi)
    return out


def oracle_split(X, idx, s1, s2, mode, min_leaf, reg_lambda=0.0, tie_rtol=1e-10):
    """Exhaustive best split of the rows ``idx`` (duplicates allowed).

    gini: s1 = sample weight, s2 = weight * label; gain is the decrease of
    weighted Gini impurity.  newton: s1 = gradient, s2 = hessian.
    Returns (feature, threshold, gain) or None.
    """
    cands = []
    w_all = s1[idx].sum()
    p_all = s2[idx].sum()

    def impurity(w, p):
        q = p / w
        return w * (1.0 - q * q - (1.0 - q) ** 2)

    for f in range(X.shape[1]):
        col = X[idx, f]
        for t in split_candidates(col):
            left = col < t
            nl, nr = int(left.sum()), int((~left).sum())
            if nl < min_leaf or nr < min_leaf:
                continue
            li, ri = idx[left], idx[~left]
            if mode == "gini":
                wl, pl = s1[li].sum(), s2[li].sum()
                wr, pr = s1[ri].sum(), s2[ri].sum()
                if wl <= 0 or wr <= 0:
                    continue
                gain = impurity(w_all, p_all) - impurity(wl, pl) - impurity(wr, pr)
            else:
                gl, hl = s1[li].sum(), s2[li].sum()
                gr, hr = s1[ri].sum(), s2[ri].sum()
                gain = 0.5 * (gl**2 / (hl + reg_lambda) + gr**2 / (hr + reg_lambda)
                              - (gl + gr)**2 / (hl + hr + reg_lambda))
            cands.append((f, t, gain))
    if not cands:
        return None
    best = max(g for _, _, g in cands)
    tol = tie_rtol * max(1.0, abs(best))
    for f, t, g in cands:
        if g >= best - tol:
            return f, t, g


def check_tree_against_oracle(tree, X, rows, s1, s2, mode, min_leaf=1, max_depth=None, reg_lambda=0.0,
                              min_split=2):
    """Walk a fitted tree and compare every node with the exhaustive oracle.

    Returns a list of mismatch descriptions (empty when the tree matches).
    """
    problems = []
    stack = [(0, np.asarray(rows), 0)]
    while stack:
        node, idx, depth = stack.pop()
        m = len(idx)
        pure = mode == "gini" and (s2[idx].sum() <= 0 or s2[idx].sum() >= s1[idx].sum())
        blocked = (max_depth is not None and depth >= max_depth) or m < min_split or m < 2 * min_leaf or pure
        want = None if blocked else oracle_split(X, idx, s1, s2, mode, min_leaf, reg_lambda)
        if want is not None and mode != "gini" and not want[2] > 1e-12:
            want = None
        if want is None:
            if tree.feature[node] != -1:
                problems.append(f"node {node}: expected leaf, got split on {tree.feature[node]}")
            continue
        f, t, _ = want
        if tree.feature[node] != f or tree.threshold[node] != t:
            problems.append(f"node {node}: expected ({f}, {t!r}), got ({tree.feature[node]}, {tree.threshold[node]!r})")
            continue
        left = X[idx, f] < t
        stack.append((tree.left[node], idx[left], depth + 1))
        stack.append((tree.right[node], idx[~left], depth + 1))
    return problems


def random_tree_data(rng, max_rows=50, max_features=8):
    """Small dataset mixing sparse integer columns (many ties and zeros) with continuous ones."""
    n = int(rng.integers(2, max_rows + 1))
    d = int(rng.integers(1, max_features + 1))
    X = np.zeros((n, d))
    for f in range(d):
        kind = rng.integers(3)
        if kind == 0:
            X[:, f] = rng.integers(0, 4, n) * (rng.random(n) < 0.5)
        elif kind == 1:
            X[:, f] = rng.integers(0, 3, n)
        else:
            X[:, f] = np.round(rng.normal(size=n), 2) * (rng.random(n) < 0.7)
    y = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(float)
    return X, y


# ---------------------------------------------------------------- cohort


def random_soup(rng, n_patients=None, n_encounters=None):
    """Random encounters over a few days: nested, overlapping, adjacent and distant ones."""
    n_patients = n_patients or int(rng.integers(1, 4))
    n_encounters = n_encounters or int(rng.integers(1, 12))
    base = 1_500_000_000 // DAY * DAY
    out = []
    for k in range(n_encounters):
        pid = f"p{int(rng.integers(n_patients))}"
        admit = base + int(rng.integers(0, 10 * DAY // HOUR)) * HOUR + int(rng.choice([0, 0, 1800]))
        length = int(rng.choice([1, 2, 6, 11, 12, 13, 24, 48, 100])) * HOUR + int(rng.integers(0, 3)) * 600
        out.append(Encounter(pid, admit, admit + length, bool(rng.random() < 0.3), (f"{pid}#{k:03d}",)))
    return out


def nested_pairs(encounters) -> int:
    n = 0
    for i, a in enumerate(encounters):
        for j, b in enumerate(encounters):
            if i != j and a.patient_id == b.patient_id and a.admit <= b.admit and b.discharge <= a.discharge:
                n += 1
    return n


def short_gaps(encounters, gap=12 * HOUR) -> int:
    n = 0
    by = {}
    for e in encounters:
        by.setdefault(e.patient_id, []).append(e)
    for group in by.values():
        group.sort(key=lambda e: e.admit)
        n += sum(1 for a, b in zip(group, group[1:]) if b.admit - a.discharge < gap)
    return n


# ---------------------------------------------------------------- sequences


def random_sequence(rng, T, sizes, q, pid="p"):
    """A DaySequence with random tokens, demographics and partially defined targets."""
    tokens = {}
    for ch in SEQUENCE_CHANNELS:
        cnt = rng.integers(0, 3, T) if sizes[ch] else np.zeros(T, dtype=np.int64)
        tokens[ch] = (np.r_[0, np.cumsum(cnt)].astype(np.int64),
                      rng.integers(0, max(sizes[ch], 1), int(cnt.sum())).astype(np.int64))
    targets = (rng.random((T, 3)) < 0.4).astype(float)
    defined = rng.random((T, 3)) < 0.8
    defined[0, :] = True
    return DaySequence(pid, np.arange(T, dtype=np.int64), tokens, rng.normal(size=(T, q)), targets, defined)


def relative_gradient_error(analytic, numeric) -> float:
    """Max over entries of |a - n| divided by the larger max-norm of the two arrays."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def finite_difference(f, arrays, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of every array (in place, restored)."""
    out = {}
    for k, a in arrays.items():
        num = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + step
            lp = f()
            a[i] = old - step
            lm = f()
            a[i] = old
            num[i] = (lp - lm) / (2 * step)
        out[k] = num
    return out
