"""Compiled CART kernels behind the random forest.

Trees are stored as flat parallel arrays (feature, threshold, left, right,
value, count); feature == -1 marks a leaf. All randomness comes from a
splitmix64 stream seeded per tree, so results are independent of thread
scheduling: a tree's stream is consumed as m bootstrap draws followed by one
draw per sampled feature at each split node.

Split search runs in one of two exactly-equivalent modes chosen per node by
size: large nodes walk a per-feature presorted global order (no sorting),
small nodes gather and sort packed integer keys. Both modes evaluate the
same weighted-Gini objective with the same candidate ordering, so the chosen
split is identical either way.
"""

import os

import numpy as np

# the sandboxed TBB build predates what numba wants; pick OpenMP up front so
# the import-time probe does not warn
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange

_GOLD = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True, inline="always")
def _splitmix_next(state):
    state = state + _GOLD
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _sort_u64(a, lo, hi):
    # iterative quicksort, median-of-3 pivot, insertion sort below 20;
    # smaller partition is pushed so stack depth stays logarithmic
    stack = np.empty(128, np.int64)
    stack[0] = lo
    stack[1] = hi
    sp = 2
    while sp > 0:
        hi = stack[sp - 1]
        lo = stack[sp - 2]
        sp -= 2
        while hi - lo > 20:
            mid = (lo + hi) // 2
            a0, a1, a2 = a[lo], a[mid], a[hi - 1]
            if a0 > a1:
                a0, a1 = a1, a0
            if a1 > a2:
                a1, a2 = a2, a1
            if a0 > a1:
                a0, a1 = a1, a0
            piv = a1
            i, j = lo, hi - 1
            while i <= j:
                while a[i] < piv:
                    i += 1
                while a[j] > piv:
                    j -= 1
                if i <= j:
                    a[i], a[j] = a[j], a[i]
                    i += 1
                    j -= 1
            if j + 1 - lo <= hi - i:
                if lo < j:
                    stack[sp] = lo
                    stack[sp + 1] = j + 1
                    sp += 2
                lo = i
            else:
                if i < hi - 1:
                    stack[sp] = i
                    stack[sp + 1] = hi
                    sp += 2
                hi = j + 1
        for i in range(lo + 1, hi):
            v = a[i]
            j = i - 1
            while j >= lo and a[j] > v:
                a[j + 1] = a[j]
                j -= 1
            a[j + 1] = v


@njit(cache=True)
def _fit_tree(rank, vor, order, y, seed, bootstrap, max_depth, min_split,
              min_leaf, k_feat, scan_thresh, feat, thr, left, right, val, cnt,
              wt, node_of, idx, perm, keys, mark, recip):
    """Grow one tree; returns the node count. Output arrays are caller-owned."""
    F, m = rank.shape
    state = np.uint64(seed)

    for r in range(m):
        wt[r] = 0
    if bootstrap:
        for _ in range(m):
            state, z = _splitmix_next(state)
            wt[np.int64(z % np.uint64(m))] += 1
    else:
        for r in range(m):
            wt[r] = 1
    nu = 0
    for r in range(m):
        if wt[r] > 0:
            idx[nu] = r
            node_of[r] = 0
            nu += 1
        else:
            node_of[r] = -1

    stack = np.empty((4 * (max_depth + 4), 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = nu
    stack[0, 3] = 0
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        nid = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        depth = stack[sp, 3]
        un = e - s
        wn = 0
        wpos = 0
        for i in range(s, e):
            r = idx[i]
            w = wt[r]
            wn += w
            wpos += w * y[r]
        cnt[nid] = wn
        val[nid] = wpos / wn
        feat[nid] = -1
        thr[nid] = 0.0
        left[nid] = -1
        right[nid] = -1
        if wpos == 0 or wpos == wn or depth >= max_depth or wn < min_split:
            continue

        kk = k_feat if k_feat < F else F
        for i in range(F):
            perm[i] = i
        for i in range(kk):
            state, z = _splitmix_next(state)
            j = i + np.int64(z % np.uint64(F - i))
            t = perm[i]
            perm[i] = perm[j]
            perm[j] = t
        for i in range(kk):
            mark[perm[i]] = True

        best_score = -np.inf
        best_f = -1
        best_t = 0.0
        for f in range(F):
            if not mark[f]:
                continue
            rrow = rank[f]
            vrow = vor[f]
            if un > scan_thresh:
                orow = order[f]
                lp = 0
                nl = 0
                prev_rk = -1
                for oi in range(m):
                    r = orow[oi]
                    if node_of[r] != nid:
                        continue
                    rk = rrow[r]
                    if rk != prev_rk and prev_rk >= 0:
                        nr = wn - nl
                        if nl >= min_leaf and nr >= min_leaf:
                            rp = wpos - lp
                            lneg = nl - lp
                            rneg = nr - rp
                            score = ((lp * lp + lneg * lneg) * recip[nl]
                                     + (rp * rp + rneg * rneg) * recip[nr])
                            if score > best_score:
                                best_score = score
                                best_f = f
                                a = vrow[prev_rk]
                                b = vrow[rk]
                                t2 = 0.5 * (a + b)
                                if t2 >= b:
                                    t2 = a
                                best_t = t2
                    w = wt[r]
                    nl += w
                    lp += w * y[r]
                    prev_rk = rk
            else:
                for i in range(un):
                    r = idx[s + i]
                    keys[i] = ((np.uint64(rrow[r]) << np.uint64(32))
                               | (np.uint64(wt[r]) << np.uint64(1))
                               | np.uint64(y[r]))
                _sort_u64(keys, 0, un)
                lp = 0
                nl = 0
                prev_rk = np.int64(keys[0] >> np.uint64(32))
                for j in range(un):
                    kj = keys[j]
                    rk = np.int64(kj >> np.uint64(32))
                    if rk != prev_rk:
                        nr = wn - nl
                        if nl >= min_leaf and nr >= min_leaf:
                            rp = wpos - lp
                            lneg = nl - lp
                            rneg = nr - rp
                            score = ((lp * lp + lneg * lneg) * recip[nl]
                                     + (rp * rp + rneg * rneg) * recip[nr])
                            if score > best_score:
                                best_score = score
                                best_f = f
                                a = vrow[prev_rk]
                                b = vrow[rk]
                                t2 = 0.5 * (a + b)
                                if t2 >= b:
                                    t2 = a
                                best_t = t2
                        prev_rk = rk
                    w = np.int64((kj >> np.uint64(1)) & np.uint64(0x7FFFFFFF))
                    nl += w
                    lp += w * np.int64(kj & np.uint64(1))

        for i in range(kk):
            mark[perm[i]] = False
        if best_f < 0:
            continue
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        rrow = rank[best_f]
        vrow = vor[best_f]
        i, j = s, e - 1
        while i <= j:
            r = idx[i]
            if vrow[rrow[r]] <= best_t:
                node_of[r] = lid
                i += 1
            else:
                t = idx[i]
                idx[i] = idx[j]
                idx[j] = t
                j -= 1
        for q in range(i, e):
            node_of[idx[q]] = rid
        feat[nid] = best_f
        thr[nid] = best_t
        left[nid] = lid
        right[nid] = rid
        stack[sp, 0] = lid
        stack[sp, 1] = s
        stack[sp, 2] = i
        stack[sp, 3] = depth + 1
        sp += 1
        stack[sp, 0] = rid
        stack[sp, 1] = i
        stack[sp, 2] = e
        stack[sp, 3] = depth + 1
        sp += 1
    return n_nodes


@njit(cache=True, parallel=True)
def fit_forest_kernel(rank, vor, order, y, seeds, bootstrap, max_depth,
                      min_split, min_leaf, k_feat, scan_thresh):
    F, m = rank.shape
    n_est = seeds.shape[0]
    cap = 2 * m + 1
    feat = np.empty((n_est, cap), np.int32)
    thr = np.empty((n_est, cap))
    left = np.empty((n_est, cap), np.int32)
    right = np.empty((n_est, cap), np.int32)
    val = np.empty((n_est, cap))
    cnt = np.empty((n_est, cap), np.int64)
    sizes = np.empty(n_est, np.int64)
    recip = np.empty(m + 1)
    recip[0] = 0.0
    for i in range(1, m + 1):
        recip[i] = 1.0 / i
    for t in prange(n_est):
        wt = np.empty(m, np.int64)
        node_of = np.empty(m, np.int32)
        idx = np.empty(m, np.int64)
        perm = np.empty(F, np.int64)
        keys = np.empty(m, np.uint64)
        mark = np.zeros(F, np.bool_)
        sizes[t] = _fit_tree(rank, vor, order, y, seeds[t], bootstrap, max_depth,
                             min_split, min_leaf, k_feat, scan_thresh,
                             feat[t], thr[t], left[t], right[t], val[t], cnt[t],
                             wt, node_of, idx, perm, keys, mark, recip)
    return feat, thr, left, right, val, cnt, sizes


@njit(cache=True, parallel=True)
def predict_proba_kernel(X, feat, thr, left, right, val):
    n = X.shape[0]
    n_trees = feat.shape[0]
    out = np.empty(n)
    for i in prange(n):
        acc = 0.0
        for t in range(n_trees):
            nid = 0
            while feat[t, nid] >= 0:
                if X[i, feat[t, nid]] <= thr[t, nid]:
                    nid = left[t, nid]
                else:
                    nid = right[t, nid]
            acc += val[t, nid]
        out[i] = acc / n_trees
    return out


def presort_features(X):
    """Per-feature dense ranks, unique sorted values, and row orderings.

    rank[f, r] is the dense rank of X[r, f] within column f; vor[f, k] the
    value holding rank k (rows beyond the unique count are padding); order[f]
    lists rows by ascending value. vor[f, rank[f, r]] == X[r, f] exactly.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    m, F = X.shape
    order = np.argsort(X, axis=0, kind="stable").T.astype(np.int32)
    order = np.ascontiguousarray(order)
    rank = np.empty((F, m), np.int32)
    vor = np.zeros((F, m), np.float64)
    _dense_ranks(X, order, rank, vor)
    return rank, vor, order


@njit(cache=True)
def _dense_ranks(X, order, rank, vor):
    F, m = order.shape
    for f in range(F):
        rk = 0
        prev = X[order[f, 0], f]
        vor[f, 0] = prev
        for i in range(m):
            r = order[f, i]
            v = X[r, f]
            if v > prev:
                rk += 1
                vor[f, rk] = v
                prev = v
            rank[f, r] = rk
