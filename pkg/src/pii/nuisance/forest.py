"""CART regression forests compiled with numba.

Trees are grown level by level. Every feature is presorted once per training
matrix and the sorted order is shared by all trees and all target columns, so
one split search over a level is a single pass per feature. Randomness (row
subsampling and per-node feature subsets) comes from a splitmix64 counter
hash keyed by a per-tree seed, so a tree depends only on its own seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = 9007199254740992.0


@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _uniform(seed, counter):
    """Uniform draw in [0, 1) from the (seed, counter) pair."""
    z = _mix(seed + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return float(z >> np.uint64(11)) / _TWO53


@njit(cache=True)
def _draw_weights(seed, n, n_draw, bootstrap, w, perm):
    """Fill ``w`` with per-row draw counts of one subsample."""
    w[:] = 0.0
    if bootstrap:
        for t in range(n_draw):
            i = int(_uniform(seed, t) * n)
            if i >= n:
                i = n - 1
            w[i] += 1.0
    elif n_draw >= n:
        w[:] = 1.0
    else:
        # partial Fisher-Yates
        for i in range(n):
            perm[i] = i
        for t in range(n_draw):
            j = t + int(_uniform(seed, t) * (n - t))
            if j >= n:
                j = n - 1
            tmp = perm[t]
            perm[t] = perm[j]
            perm[j] = tmp
            w[perm[t]] = 1.0


@njit(cache=True)
def _grow(X, order, xs, y, w, seed, max_depth, min_leaf, m_try,
          feat, thr, left, right, value,
          rows, vals, buf_r, buf_v, goes_left, fperm,
          lvl, nxt, best_f, best_t, best_s, best_w):
    """Grow one tree into the preallocated node arrays; returns node count.

    ``order[f]`` lists rows sorted by feature f and ``xs[f]`` the matching
    sorted values. Each open node owns the same contiguous segment of every
    per-feature row list; splitting a node stably partitions that segment in
    all lists. ``lvl``/``nxt`` hold (node id, start, end) per open node.
    """
    n, q = X.shape
    n_s = 0
    for f in range(q):
        k = 0
        for t in range(n):
            # branchless compaction of sampled rows
            i = order[f, t]
            rows[f, k] = i
            vals[f, k] = xs[f, t]
            k += w[i] > 0.0
        n_s = k
    key_base = np.uint64(0x5851F42D4C957F2D) ^ seed
    counter = 0

    cap = feat.shape[0]
    feat[0] = -1
    left[0] = -1
    right[0] = -1
    n_nodes = 1
    m = 1
    lvl[0, 0] = 0
    lvl[0, 1] = 0
    lvl[0, 2] = n_s
    depth = 0
    while m > 0:
        for l in range(m):
            best_f[l] = -1
            a0 = lvl[l, 1]
            a1 = lvl[l, 2]
            Wl = 0.0
            Sl = 0.0
            Ql = 0.0
            for t in range(a0, a1):
                i = rows[0, t]
                wi = w[i]
                Wl += wi
                Sl += wi * y[i]
                Ql += wi * y[i] * y[i]
            value[lvl[l, 0]] = Sl / Wl
            best_s[m + l] = Sl
            best_w[m + l] = Wl
            if max_depth >= 0 and depth >= max_depth:
                continue
            if Wl < 2.0 * min_leaf:
                continue
            if Ql - Sl * Sl / Wl <= 1e-12 * (Ql + 1e-300):
                continue
            for f in range(q):
                fperm[f] = f
            n_f = q if m_try >= q else m_try
            if n_f < q:
                for r in range(n_f):
                    j = r + int(_uniform(key_base, counter) * (q - r))
                    counter += 1
                    if j >= q:
                        j = q - 1
                    tmp = fperm[r]
                    fperm[r] = fperm[j]
                    fperm[j] = tmp
            best = -np.inf
            for r in range(n_f):
                f = fperm[r]
                WL = 0.0
                SL = 0.0
                prev = vals[f, a0]
                for t in range(a0, a1):
                    v = vals[f, t]
                    if v > prev and WL >= min_leaf and Wl - WL >= min_leaf:
                        SR = Sl - SL
                        crit = SL * SL / WL + SR * SR / (Wl - WL)
                        if crit > best:
                            best = crit
                            best_f[l] = f
                            best_s[l] = SL
                            best_w[l] = WL
                            mid = prev + 0.5 * (v - prev)
                            if mid >= v:
                                mid = prev
                            best_t[l] = mid
                    i = rows[f, t]
                    WL += w[i]
                    SL += w[i] * y[i]
                    prev = v
            parent = Sl * Sl / Wl
            if best_f[l] >= 0 and best - parent <= 1e-12 * max(1.0, abs(parent)):
                best_f[l] = -1

        k = 0
        for l in range(m):
            if best_f[l] < 0 or n_nodes + 2 > cap:
                continue
            fb = best_f[l]
            tb = best_t[l]
            node = lvl[l, 0]
            if max_depth >= 0 and depth + 1 >= max_depth:
                # children are leaves: values follow from the split sums
                feat[node] = fb
                thr[node] = tb
                left[node] = n_nodes
                right[node] = n_nodes + 1
                for c in range(2):
                    feat[n_nodes + c] = -1
                    left[n_nodes + c] = -1
                    right[n_nodes + c] = -1
                sl = best_s[l]
                wl = best_w[l]
                value[n_nodes] = sl / wl
                value[n_nodes + 1] = (best_s[m + l] - sl) / (best_w[m + l] - wl)
                n_nodes += 2
                continue
            a0 = lvl[l, 1]
            a1 = lvl[l, 2]
            n_left = 0
            for t in range(a0, a1):
                i = rows[0, t]
                gl = X[i, fb] <= tb
                goes_left[i] = gl
                n_left += gl
            for f in range(q):
                a = a0
                b = 0
                for t in range(a0, a1):
                    # branchless stable partition
                    i = rows[f, t]
                    v = vals[f, t]
                    gl = goes_left[i]
                    rows[f, a] = i
                    vals[f, a] = v
                    buf_r[b] = i
                    buf_v[b] = v
                    a += gl
                    b += 1 - gl
                for t in range(b):
                    rows[f, a + t] = buf_r[t]
                    vals[f, a + t] = buf_v[t]
            feat[node] = fb
            thr[node] = tb
            left[node] = n_nodes
            right[node] = n_nodes + 1
            for c in range(2):
                feat[n_nodes + c] = -1
                left[n_nodes + c] = -1
                right[n_nodes + c] = -1
            nxt[k, 0] = n_nodes
            nxt[k, 1] = a0
            nxt[k, 2] = a0 + n_left
            nxt[k + 1, 0] = n_nodes + 1
            nxt[k + 1, 1] = a0 + n_left
            nxt[k + 1, 2] = a1
            n_nodes += 2
            k += 2
        for l in range(k):
            for c in range(3):
                lvl[l, c] = nxt[l, c]
        m = k
        depth += 1
    return n_nodes


@njit(cache=True)
def _fit_forests(X, order, xs, Y, seeds, n_trees, n_draw, bootstrap,
                 max_depth, min_leaf, m_try, cap):
    n, q = X.shape
    s = Y.shape[1]
    feat = np.full((s, n_trees, cap), -1, dtype=np.int64)
    thr = np.zeros((s, n_trees, cap))
    left = np.full((s, n_trees, cap), -1, dtype=np.int64)
    right = np.full((s, n_trees, cap), -1, dtype=np.int64)
    value = np.zeros((s, n_trees, cap))
    w = np.zeros(n)
    perm = np.empty(n, dtype=np.int64)
    rows = np.empty((q, n), dtype=np.int64)
    vals = np.empty((q, n))
    buf_r = np.empty(n, dtype=np.int64)
    buf_v = np.empty(n)
    goes_left = np.zeros(n, dtype=np.int64)
    fperm = np.empty(q, dtype=np.int64)
    lvl = np.empty((cap + 1, 3), dtype=np.int64)
    nxt = np.empty((cap + 1, 3), dtype=np.int64)
    best_f = np.empty(cap + 1, dtype=np.int64)
    best_t = np.empty(cap + 1)
    best_s = np.empty(2 * cap + 2)
    best_w = np.empty(2 * cap + 2)
    y = np.empty(n)
    for c in range(s):
        for i in range(n):
            y[i] = Y[i, c]
        for b in range(n_trees):
            tree_seed = _mix(seeds[c] + np.uint64(b + 1) * _GOLDEN)
            _draw_weights(tree_seed, n, n_draw, bootstrap, w, perm)
            _grow(X, order, xs, y, w, tree_seed, max_depth, min_leaf, m_try,
                  feat[c, b], thr[c, b], left[c, b], right[c, b], value[c, b],
                  rows, vals, buf_r, buf_v, goes_left, fperm,
                  lvl, nxt, best_f, best_t, best_s, best_w)
    return feat, thr, left, right, value


@njit(cache=True)
def _predict(feat, thr, left, right, value, X):
    s, n_trees, _ = feat.shape
    m = X.shape[0]
    out = np.zeros((m, s))
    for c in range(s):
        for b in range(n_trees):
            for i in range(m):
                node = 0
                while feat[c, b, node] >= 0:
                    if X[i, feat[c, b, node]] <= thr[c, b, node]:
                        node = left[c, b, node]
                    else:
                        node = right[c, b, node]
                out[i, c] += value[c, b, node]
        for i in range(m):
            out[i, c] /= n_trees
    return out


@dataclass(frozen=True)
class ForestModel:
    """Fitted forests, one per target column, stored as flat node arrays."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} feature columns, got shape {features.shape}")
        return _predict(self.feature, self.threshold, self.left, self.right,
                        self.value, features)


def resolve_m_try(m_try: int | str, q: int) -> int:
    if m_try == "all":
        return q
    if m_try == "third":
        return max(1, -(-q // 3))
    if isinstance(m_try, (int, np.integer)) and m_try >= 1:
        return min(int(m_try), q)
    raise ValueError(f"invalid m_try {m_try!r}")


def fit_forests(features: np.ndarray, targets: np.ndarray, seeds: np.ndarray, *,
                n_trees: int, max_depth: int | None, max_samples: float,
                m_try: int | str, bootstrap: bool, min_leaf: int) -> ForestModel:
    """Fit one forest per column of ``targets``.

    ``seeds`` holds one unsigned 64-bit seed per target column.
    """
    X = np.ascontiguousarray(features, dtype=np.float64)
    Y = np.ascontiguousarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, q = X.shape
    if n < 2 * min_leaf:
        raise ValueError(f"forest needs n >= 2*min_leaf, got n={n}, min_leaf={min_leaf}")
    n_draw = int(np.ceil(max_samples * n))
    order = np.argsort(X.T, axis=1, kind="stable")
    xs = np.take_along_axis(X.T, order, axis=1)
    depth = -1 if max_depth is None else int(max_depth)
    max_leaves = max(1, n_draw // max(1, min_leaf))
    if depth >= 0:
        max_leaves = min(max_leaves, 2 ** depth)
    cap = 2 * max_leaves - 1
    arrays = _fit_forests(X, np.ascontiguousarray(order), np.ascontiguousarray(xs), Y, np.asarray(seeds, dtype=np.uint64),
                          int(n_trees), n_draw, bool(bootstrap), depth,
                          int(min_leaf), resolve_m_try(m_try, q), cap)
    return ForestModel(*arrays, n_features=q)
