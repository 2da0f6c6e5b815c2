"""Compiled inner loops for graph traversal and pruning.

The pure-Python versions in :mod:`decoupled_ann.graph` and
:mod:`decoupled_ann.buffer` define the behavior; these kernels must produce
identical queues, visit orders and buffer counters (checked in the tests).
"""

import numpy as np
from numba import njit

SENTINEL = np.uint32(0xFFFFFFFF)


@njit(cache=True, nogil=True)
def _adc_row(table, codes, node):
    m = table.shape[0]
    acc = np.float32(0.0)
    for j in range(m):
        acc = acc + table[j, codes[node, j]]
    return acc


@njit(cache=True, nogil=True)
def _less(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(cache=True, nogil=True)
def pq_greedy_search(topo, rw, topo_page, topo_slot, codes, table, entry, l,
                     pinned_mask, budget, n_nodes):
    """Best-first search under PQ distances, reading adjacency through a query buffer.

    Returns (queue ids, queue dists, visited ids, visited dists, hits, misses, pinned hits).
    """
    q_ids = np.empty(l + 1, dtype=np.int64)
    q_d = np.empty(l + 1, dtype=np.float32)
    q_exp = np.zeros(l + 1, dtype=np.uint8)
    seen = np.zeros(n_nodes, dtype=np.uint8)
    vis_ids = np.empty(16, dtype=np.int64)
    vis_d = np.empty(16, dtype=np.float32)
    n_vis = 0

    buf_pages = np.full(max(budget, 1), -1, dtype=np.int64)
    buf_stamp = np.zeros(max(budget, 1), dtype=np.int64)
    n_buf = 0
    tick = 0
    hits = 0
    misses = 0
    pinned_hits = 0

    q_ids[0] = entry
    q_d[0] = _adc_row(table, codes, entry)
    n_q = 1
    seen[entry] = 1
    cur = 0
    while cur < n_q:
        p = q_ids[cur]
        pd = q_d[cur]
        q_exp[cur] = 1
        if n_vis == vis_ids.shape[0]:
            vis_ids = np.concatenate((vis_ids, np.empty(n_vis, dtype=np.int64)))
            vis_d = np.concatenate((vis_d, np.empty(n_vis, dtype=np.float32)))
        vis_ids[n_vis] = p
        vis_d[n_vis] = pd
        n_vis += 1

        page = topo_page[p]
        tick += 1
        if pinned_mask[page]:
            hits += 1
            pinned_hits += 1
        else:
            found = -1
            for b in range(n_buf):
                if buf_pages[b] == page:
                    found = b
                    break
            if found >= 0:
                hits += 1
                buf_stamp[found] = tick
            else:
                misses += 1
                if budget > 0:
                    if n_buf < budget:
                        buf_pages[n_buf] = page
                        buf_stamp[n_buf] = tick
                        n_buf += 1
                    else:
                        lru = 0
                        for b in range(1, n_buf):
                            if buf_stamp[b] < buf_stamp[lru]:
                                lru = b
                        buf_pages[lru] = page
                        buf_stamp[lru] = tick

        base = topo_slot[p] * rw
        cnt = topo[page, base + 1]
        low = n_q
        for t in range(cnt):
            w = np.int64(topo[page, base + 2 + t])
            if seen[w]:
                continue
            seen[w] = 1
            d = _adc_row(table, codes, w)
            if n_q == l and not _less(d, w, q_d[n_q - 1], q_ids[n_q - 1]):
                continue
            pos = n_q
            while pos > 0 and _less(d, w, q_d[pos - 1], q_ids[pos - 1]):
                pos -= 1
            last = n_q if n_q < l else n_q - 1
            for s in range(last, pos, -1):
                q_ids[s] = q_ids[s - 1]
                q_d[s] = q_d[s - 1]
                q_exp[s] = q_exp[s - 1]
            q_ids[pos] = w
            q_d[pos] = d
            q_exp[pos] = 0
            if n_q < l:
                n_q += 1
            if pos < low:
                low = pos
        # next unexpanded candidate: either a new insertion or past the current one
        nxt = low if low < cur else cur
        while nxt < n_q and q_exp[nxt]:
            nxt += 1
        cur = nxt
    return q_ids[:n_q].copy(), q_d[:n_q].copy(), vis_ids[:n_vis].copy(), vis_d[:n_vis].copy(), \
        hits, misses, pinned_hits


@njit(cache=True, nogil=True)
def robust_prune(cand_vecs, cand_dists, R, alpha):
    """Greedy alpha-pruning over candidates already sorted by distance to the base point.

    ``cand_dists`` are squared distances to the base point; the rule
    alpha * d(v, u) <= d(p, u) on Euclidean distances is evaluated squared.
    Returns indices into the candidate arrays, in selection order.
    """
    n = cand_vecs.shape[0]
    alive = np.ones(n, dtype=np.uint8)
    out = np.empty(min(R, n), dtype=np.int64)
    n_out = 0
    a2 = alpha * alpha
    dim = cand_vecs.shape[1]
    for i in range(n):
        if n_out >= R:
            break
        if not alive[i]:
            continue
        out[n_out] = i
        n_out += 1
        alive[i] = 0
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            s = 0.0
            for t in range(dim):
                diff = np.float64(cand_vecs[i, t]) - np.float64(cand_vecs[j, t])
                s += diff * diff
            if a2 * s <= cand_dists[j]:
                alive[j] = 0
    return out[:n_out].copy()


@njit(cache=True, nogil=True)
def sq_dists(q, vecs):
    """Squared Euclidean distances from ``q`` to each row, accumulated in float64."""
    n = vecs.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for t in range(q.shape[0]):
            diff = np.float64(vecs[i, t]) - np.float64(q[t])
            s += diff * diff
        out[i] = s
    return out


@njit(cache=True, nogil=True)
def _sdc(sdc, codes, a, b):
    m = codes.shape[1]
    acc = 0.0
    for j in range(m):
        acc += sdc[j, codes[a, j], codes[b, j]]
    return acc


@njit(cache=True, nogil=True)
def sdc_prune(base, cands, codes, sdc, R, max_c, alpha):
    """Alpha-prune ``cands`` around ``base`` using distances between PQ reconstructions.

    ``sdc[j, a, b]`` is the squared distance between centroids ``a`` and
    ``b`` of subspace ``j``. Candidates are ordered by (distance, id) and cut
    to ``max_c`` first. Returns the kept ids in selection order.
    """
    n = cands.shape[0]
    dists = np.empty(n, dtype=np.float64)
    for i in range(n):
        dists[i] = _sdc(sdc, codes, base, cands[i])
    order = np.argsort(dists, kind="mergesort")
    # equal distances: lower id first
    for a in range(1, n):
        x = order[a]
        c = a
        while c > 0 and dists[order[c - 1]] == dists[x] and cands[order[c - 1]] > cands[x]:
            order[c] = order[c - 1]
            c -= 1
        order[c] = x
    n = min(n, max_c)
    alive = np.ones(n, dtype=np.uint8)
    out = np.empty(min(R, n), dtype=np.int64)
    n_out = 0
    a2 = alpha * alpha
    for i in range(n):
        if n_out >= R:
            break
        if not alive[i]:
            continue
        vi = cands[order[i]]
        out[n_out] = vi
        n_out += 1
        for j in range(i + 1, n):
            if alive[j] and a2 * _sdc(sdc, codes, vi, cands[order[j]]) <= dists[order[j]]:
                alive[j] = 0
    return out[:n_out].copy()


@njit(cache=True, nogil=True)
def add_reverse_edges(topo, rw, R, max_c, alpha, topo_page, topo_slot, state, deleted_state, node, chosen,
                      codes, sdc):
    """Append ``node`` to the adjacency of every ``chosen`` node, in place in ``topo``.

    A list that would exceed ``R`` drops deleted ids and, if still too long,
    is pruned with :func:`sdc_prune`. Mirrors the Python path of
    :meth:`decoupled_ann.graph.Index._add_reverse_edges`.
    """
    cand = np.empty(R + 1, dtype=np.int64)
    for i in range(chosen.shape[0]):
        u = chosen[i]
        page = topo_page[u]
        b = topo_slot[u] * rw
        cnt = np.int64(topo[page, b + 1])
        if cnt < R:
            topo[page, b + 2 + cnt] = node
            topo[page, b + 1] = cnt + 1
            continue
        n = 0
        for t in range(cnt):
            w = np.int64(topo[page, b + 2 + t])
            if state[w] != deleted_state:
                cand[n] = w
                n += 1
        cand[n] = node
        n += 1
        if n <= R:
            kept = cand[:n]
        else:
            kept = sdc_prune(u, cand[:n], codes, sdc, R, max_c, alpha)
        k = kept.shape[0]
        for t in range(k):
            topo[page, b + 2 + t] = kept[t]
        for t in range(k, R):
            topo[page, b + 2 + t] = SENTINEL
        topo[page, b + 1] = k


@njit(cache=True, nogil=True)
def nearest_centroid(x, centers, labels, best):
    """For each row of ``x`` the first centroid at minimum squared distance (float64 sums)."""
    n, d = x.shape
    k = centers.shape[0]
    for i in range(n):
        bi = 0
        bd = np.inf
        for c in range(k):
            s = 0.0
            for t in range(d):
                diff = np.float64(x[i, t]) - np.float64(centers[c, t])
                s += diff * diff
            if s < bd:
                bd = s
                bi = c
        labels[i] = bi
        best[i] = bd
