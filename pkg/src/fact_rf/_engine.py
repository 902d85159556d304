"""Compiled kernels for CART regression trees.

Trees are stored as flat node arrays. A node with ``feature < 0`` is a leaf.
Rows reaching a node are kept as unique indices plus bootstrap multiplicities,
so a with-replacement resample of size n touches roughly 0.63 n distinct rows.
"""

import numpy as np
from numba import njit

LEAF = -1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def counter_uniform(key, counter):
    """Uniform [0, 1) draw number ``counter`` of the stream ``key`` (splitmix64)."""
    z = mix64(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return float(z >> np.uint64(11)) * _INV53


@njit(cache=True, nogil=True)
def _randbelow(key, counter, n):
    k = int(counter_uniform(key, counter) * n)
    if k >= n:
        k = n - 1
    return k


@njit(cache=True, nogil=True)
def draw_sample_counts(key, n, sample_size, replace):
    """Per-row multiplicities of the resample drawn for one tree."""
    counts = np.zeros(n, dtype=np.int32)
    if replace:
        for t in range(sample_size):
            counts[_randbelow(key, t, n)] += 1
    else:
        perm = np.arange(n)
        for t in range(sample_size):
            r = t + _randbelow(key, t, n - t)
            tmp = perm[t]
            perm[t] = perm[r]
            perm[r] = tmp
            counts[perm[t]] = 1
    return counts


@njit(cache=True, nogil=True)
def _scan_feature(xt, y, w, seg, f, mu, wsum, ctot, base, floor, min_node_size,
                  best_f, best_thr, best_dec):
    """Scan one feature whose node rows ``seg`` are sorted by value."""
    m = seg.shape[0]
    wl = 0.0
    sl = 0.0
    for k in range(m - 1):
        r = seg[k]
        wl += w[r]
        sl += w[r] * (y[r] - mu)
        lo = xt[f, r]
        hi = xt[f, seg[k + 1]]
        if not (lo < hi):
            continue
        wr = wsum - wl
        if wl < min_node_size or wr < min_node_size:
            continue
        sr = ctot - sl
        dec = sl * sl / wl + sr * sr / wr - base
        # ties within rounding keep the earlier (feature, threshold)
        if dec > best_dec + floor:
            thr = 0.5 * (lo + hi)
            if not (thr < hi):
                thr = lo
            best_dec = dec
            best_f = f
            best_thr = thr
    return best_f, best_thr, best_dec


@njit(cache=True, nogil=True)
def _node_moments(y, w, seg):
    """Weight, mean, SSE and centered residual sum; SSE is 0 for constant y."""
    wsum = 0.0
    ysum = 0.0
    lo = y[seg[0]]
    hi = lo
    for r in seg:
        wsum += w[r]
        ysum += w[r] * y[r]
        lo = min(lo, y[r])
        hi = max(hi, y[r])
    mu = ysum / wsum
    if lo == hi:
        return wsum, lo, 0.0, 0.0
    sse = 0.0
    ctot = 0.0
    for r in seg:
        d = y[r] - mu
        sse += w[r] * d * d
        ctot += w[r] * d
    return wsum, mu, sse, ctot


@njit(cache=True, nogil=True)
def node_best_split(xt, y, w, rows, features, min_node_size):
    """Best (feature, threshold, decrease) over sorted ``features`` for ``rows``.

    Ties keep the first candidate met, i.e. the smallest feature index and then
    the smallest threshold. Returns feature -1 when no split has strictly
    positive decrease.
    """
    if rows.shape[0] < 2:
        return -1, 0.0, 0.0
    wsum, mu, sse, ctot = _node_moments(y, w, rows)
    if sse <= 0.0:
        return -1, 0.0, 0.0
    base = ctot * ctot / wsum
    vals = np.empty(rows.shape[0])
    best_f, best_thr, best_dec = -1, 0.0, 0.0
    for f in features:
        for t in range(rows.shape[0]):
            vals[t] = xt[f, rows[t]]
        seg = rows[np.argsort(vals, kind="mergesort")]
        best_f, best_thr, best_dec = _scan_feature(
            xt, y, w, seg, f, mu, wsum, ctot, base, 1e-12 * sse,
            min_node_size, best_f, best_thr, best_dec)
    return best_f, best_thr, best_dec


@njit(cache=True, nogil=True)
def column_order(xt):
    """Stable ascending row order of every column (computed once per matrix)."""
    p, n = xt.shape
    order = np.empty((p, n), dtype=np.int32)
    for f in range(p):
        order[f] = np.argsort(xt[f], kind="mergesort").astype(np.int32)
    return order


@njit(cache=True, nogil=True)
def grow_tree(xt, y, counts, allowed, order, mtry, min_node_size, max_depth, key,
              bufs):
    """Grow one tree on the rows with positive ``counts``.

    ``allowed`` lists usable columns in ascending order and ``order`` is
    :func:`column_order` of ``xt``. Every allowed column keeps its node rows
    presorted, so splitting costs a stable partition instead of a sort.
    ``bufs`` is reusable scratch of shape (2, len(allowed), n) with an integer
    dtype wide enough for n; the two halves alternate between parent and
    children to skip copy-backs.
    Returns (feature, threshold, left, right, value, count, decrease) arrays;
    ``max_depth < 0`` means unlimited depth.
    """
    n = counts.shape[0]
    n_allowed = allowed.shape[0]
    m = 0
    for i in range(n):
        if counts[i] > 0:
            m += 1
    for a in range(n_allowed):
        col = order[allowed[a]]
        t = 0
        for i in range(n):
            r = col[i]
            if counts[r] > 0:
                bufs[0, a, t] = r
                t += 1
    w = counts.astype(np.float64)
    goes_left = np.zeros(n, dtype=np.uint8)

    cap = 2 * m + 1
    feat = np.full(cap, LEAF, dtype=np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)
    cnt = np.zeros(cap, dtype=np.int32)
    dec = np.zeros(cap)

    # pool holds positions into ``allowed``; partial Fisher-Yates keeps it a permutation
    pool = np.arange(n_allowed)
    k_try = min(mtry, n_allowed)
    cand = np.empty(k_try, dtype=np.int64)
    draws = np.uint64(0)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_buf = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    stack_buf[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        s = stack_start[top]
        e = stack_end[top]
        depth = stack_depth[top]
        cur = bufs[stack_buf[top]]
        nxt = bufs[1 - stack_buf[top]]

        wsum, mu, sse, ctot = _node_moments(y, w, cur[0, s:e])
        value[node] = mu
        cnt[node] = int(wsum)

        if wsum < 2 * min_node_size or sse <= 0.0:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        for t in range(k_try):
            u = t + int(counter_uniform(key, draws) * (n_allowed - t))
            draws += np.uint64(1)
            if u >= n_allowed:
                u = n_allowed - 1
            tmp = pool[t]
            pool[t] = pool[u]
            pool[u] = tmp
        cand[:] = np.sort(pool[:k_try])

        base = ctot * ctot / wsum
        floor = 1e-12 * sse
        best_f, best_thr, best_dec = -1, 0.0, 0.0
        best_a = -1
        for c in range(k_try):
            a = cand[c]
            prev = best_f
            best_f, best_thr, best_dec = _scan_feature(
                xt, y, w, cur[a, s:e], allowed[a], mu, wsum, ctot,
                base, floor, min_node_size, best_f, best_thr, best_dec)
            if best_f != prev:
                best_a = a
        if best_f < 0:
            continue

        n_left = 0
        wl = 0.0
        yl = 0.0
        for t in range(s, e):
            r = cur[best_a, t]
            g = np.uint8(1) if xt[best_f, r] <= best_thr else np.uint8(0)
            goes_left[r] = g
            n_left += g
            wl += g * w[r]
            yl += g * w[r] * y[r]
        mid = s + n_left

        feat[node] = best_f
        thr[node] = best_thr
        dec[node] = best_dec
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode

        wr = wsum - wl
        capped = max_depth >= 0 and depth + 1 >= max_depth
        if capped or (wl < 2 * min_node_size and wr < 2 * min_node_size):
            # both children are leaves, so their row order is never needed
            value[lnode] = yl / wl
            cnt[lnode] = int(wl)
            yr = 0.0
            for t in range(s, e):
                r = cur[best_a, t]
                yr += (1 - goes_left[r]) * w[r] * y[r]
            value[rnode] = yr / wr
            cnt[rnode] = int(wr)
            continue
        # branchless stable partition into the other buffer
        for a in range(n_allowed):
            src = cur[a]
            dst = nxt[a]
            li = s
            ri = mid
            for t in range(s, e):
                r = src[t]
                g = np.int64(goes_left[r])
                dst[ri + g * (li - ri)] = r
                li += g
                ri += 1 - g

        child_buf = 1 - stack_buf[top]
        stack_node[top] = rnode
        stack_start[top] = mid
        stack_end[top] = e
        stack_depth[top] = depth + 1
        stack_buf[top] = child_buf
        top += 1
        stack_node[top] = lnode
        stack_start[top] = s
        stack_end[top] = mid
        stack_depth[top] = depth + 1
        stack_buf[top] = child_buf
        top += 1

    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), cnt[:n_nodes].copy(),
            dec[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _leaf_value(feat, thr, left, right, value, root, x):
    node = root
    while feat[node] >= 0:
        if x[feat[node]] <= thr[node]:
            node = root + left[node]
        else:
            node = root + right[node]
    return value[node]


@njit(cache=True, nogil=True)
def predict_trees(feat, thr, left, right, value, offsets, X):
    """Per-tree predictions, shape (n_trees, n_rows). Child links are tree-local."""
    n_trees = offsets.shape[0] - 1
    n = X.shape[0]
    out = np.empty((n_trees, n))
    for k in range(n_trees):
        root = offsets[k]
        for i in range(n):
            out[k, i] = _leaf_value(feat, thr, left, right, value, root, X[i])
    return out


@njit(cache=True, nogil=True)
def predict_mean(feat, thr, left, right, value, offsets, X):
    n_trees = offsets.shape[0] - 1
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for k in range(n_trees):
            acc += _leaf_value(feat, thr, left, right, value, offsets[k], X[i])
        out[i] = acc / n_trees
    return out


@njit(cache=True, nogil=True)
def predict_oob(feat, thr, left, right, value, offsets, inbag, X):
    """Mean over trees whose resample excluded row i; NaN where none did."""
    n_trees = offsets.shape[0] - 1
    n = X.shape[0]
    out = np.full(n, np.nan)
    for i in range(n):
        acc = 0.0
        used = 0
        for k in range(n_trees):
            if inbag[k, i] == 0:
                acc += _leaf_value(feat, thr, left, right, value, offsets[k], X[i])
                used += 1
        if used > 0:
            out[i] = acc / used
    return out


@njit(cache=True, nogil=True)
def apply_tree(feat, thr, left, right, root, X):
    """Tree-local index of the leaf each row of ``X`` lands in."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = root
        while feat[node] >= 0:
            if X[i, feat[node]] <= thr[node]:
                node = root + left[node]
            else:
                node = root + right[node]
        out[i] = node - root
    return out
