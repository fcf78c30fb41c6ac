"""Hot numeric kernels: boosted regression-tree fitting and prediction.

Two implementations are provided: numba-compiled loops (default) and a
vectorized pure-numpy path. Set POLICYSHIFT_NO_NUMBA=1 to force the numpy
path (also used automatically when numba is unavailable).

A fitted forest is a tuple of flat arrays. Trees are complete binary trees
of depth `max_depth` stored implicitly: node 0 is the root, node i has
children 2i+1 and 2i+2. `feat[t, i] == -1` marks a leaf; leaf predictions
live in `value[t, i]`.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("POLICYSHIFT_NO_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def _fit_forest_py(X, y, n_trees, max_depth, shrinkage, min_leaf):
    n, p = X.shape
    n_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    thresh = np.zeros((n_trees, n_nodes))
    value = np.zeros((n_trees, n_nodes))
    base = y.mean()
    resid = y - base
    for t in range(n_trees):
        # node_rows[i] holds the row indices routed to node i of this tree
        node_rows = {0: np.arange(n)}
        pred = np.zeros(n)
        for node in range(n_nodes):
            rows = node_rows.get(node)
            if rows is None:
                continue
            r = resid[rows]
            value[t, node] = r.mean()
            depth = int(np.floor(np.log2(node + 1)))
            if depth >= max_depth or rows.size < 2 * min_leaf:
                pred[rows] = value[t, node]
                continue
            best_gain = 0.0
            best_f = -1
            best_thr = 0.0
            tot = r.sum()
            m = rows.size
            for f in range(p):
                xv = X[rows, f]
                order = np.argsort(xv, kind="stable")
                xs = xv[order]
                cs = np.cumsum(r[order])
                nl = np.arange(1, m)
                ok = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (m - nl >= min_leaf)
                if not ok.any():
                    continue
                ls = cs[:-1]
                gain = ls**2 / nl + (tot - ls) ** 2 / (m - nl) - tot**2 / m
                gain = np.where(ok, gain, -np.inf)
                j = int(np.argmax(gain))
                if gain[j] > best_gain + 1e-12:
                    best_gain = gain[j]
                    best_f = f
                    best_thr = 0.5 * (xs[j] + xs[j + 1])
            if best_f < 0:
                pred[rows] = value[t, node]
                continue
            feat[t, node] = best_f
            thresh[t, node] = best_thr
            left = rows[X[rows, best_f] <= best_thr]
            right = rows[X[rows, best_f] > best_thr]
            node_rows[2 * node + 1] = left
            node_rows[2 * node + 2] = right
        resid -= shrinkage * pred
    return base, feat, thresh, value


def _predict_forest_py(X, base, feat, thresh, value, shrinkage):
    n = X.shape[0]
    n_trees, n_nodes = feat.shape
    out = np.full(n, base)
    for t in range(n_trees):
        node = np.zeros(n, dtype=np.int64)
        while True:
            f = feat[t, node]
            active = f >= 0
            if not active.any():
                break
            go_right = np.zeros(n, dtype=bool)
            go_right[active] = X[np.nonzero(active)[0], f[active]] > thresh[t, node[active]]
            node = np.where(active, 2 * node + 1 + go_right, node)
        out += shrinkage * value[t, node]
    return out


def _fit_forest_loops(X, y, n_trees, max_depth, shrinkage, min_leaf):
    n, p = X.shape
    n_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    thresh = np.zeros((n_trees, n_nodes))
    value = np.zeros((n_trees, n_nodes))
    base = y.mean()
    resid = y - base
    node_of = np.zeros(n, dtype=np.int64)
    pred = np.zeros(n)
    for t in range(n_trees):
        node_of[:] = 0
        pred[:] = 0.0
        for node in range(n_nodes):
            m = 0
            for i in range(n):
                if node_of[i] == node:
                    m += 1
            if m == 0:
                continue
            rows = np.empty(m, dtype=np.int64)
            j = 0
            for i in range(n):
                if node_of[i] == node:
                    rows[j] = i
                    j += 1
            tot = 0.0
            for j in range(m):
                tot += resid[rows[j]]
            value[t, node] = tot / m
            depth = 0
            k = node + 1
            while k > 1:
                k //= 2
                depth += 1
            if depth >= max_depth or m < 2 * min_leaf:
                for j in range(m):
                    pred[rows[j]] = value[t, node]
                continue
            best_gain = 0.0
            best_f = -1
            best_thr = 0.0
            for f in range(p):
                xv = np.empty(m)
                for j in range(m):
                    xv[j] = X[rows[j], f]
                order = np.argsort(xv, kind="mergesort")
                ls = 0.0
                for j in range(m - 1):
                    ls += resid[rows[order[j]]]
                    nl = j + 1
                    nr = m - nl
                    if xv[order[j + 1]] <= xv[order[j]]:
                        continue
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    rs = tot - ls
                    gain = ls * ls / nl + rs * rs / nr - tot * tot / m
                    if gain > best_gain + 1e-12:
                        best_gain = gain
                        best_f = f
                        best_thr = 0.5 * (xv[order[j]] + xv[order[j + 1]])
            if best_f < 0:
                for j in range(m):
                    pred[rows[j]] = value[t, node]
                continue
            feat[t, node] = best_f
            thresh[t, node] = best_thr
            for j in range(m):
                i = rows[j]
                if X[i, best_f] <= best_thr:
                    node_of[i] = 2 * node + 1
                else:
                    node_of[i] = 2 * node + 2
        for i in range(n):
            resid[i] -= shrinkage * pred[i]
    return base, feat, thresh, value


def _predict_forest_loops(X, base, feat, thresh, value, shrinkage):
    n = X.shape[0]
    n_trees = feat.shape[0]
    out = np.full(n, base)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            node = 0
            while feat[t, node] >= 0:
                if X[i, feat[t, node]] <= thresh[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            acc += value[t, node]
        out[i] += shrinkage * acc
    return out


if USE_NUMBA:
    fit_forest = njit(cache=True)(_fit_forest_loops)
    predict_forest = njit(cache=True)(_predict_forest_loops)
else:
    fit_forest = _fit_forest_py
    predict_forest = _predict_forest_py
