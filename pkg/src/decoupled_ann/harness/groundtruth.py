"""Exact nearest neighbors and recall."""

from __future__ import annotations

import numpy as np


def brute_force_knn(base, queries, k: int, *, ids=None, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-``k`` by squared Euclidean distance, ties broken by lower id.

    Candidates are shortlisted with the norm expansion in float64 and their
    distances recomputed from differences before the final sort, so the
    ranking does not depend on cancellation error. Returns (ids, distances),
    each of shape (n_queries, k). ``ids`` maps base rows to node ids.
    """
    base = np.asarray(base, dtype=np.float32)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    n = base.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    b64 = base.astype(np.float64)
    norms = np.einsum("nd,nd->n", b64, b64)
    shortlist = min(n, k + 32)
    out_ids = np.empty((len(queries), k), dtype=np.int64)
    out_d = np.empty((len(queries), k), dtype=np.float64)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk].astype(np.float64)
        approx = norms[None, :] - 2.0 * (q @ b64.T)
        if shortlist < n:
            cand = np.argpartition(approx, shortlist - 1, axis=1)[:, :shortlist]
        else:
            cand = np.broadcast_to(np.arange(n), approx.shape)
        for i in range(len(q)):
            c = cand[i]
            diff = b64[c] - q[i]
            d = np.einsum("nd,nd->n", diff, diff)
            order = np.lexsort((ids[c], d))[:k]
            out_ids[s + i] = ids[c][order]
            out_d[s + i] = d[order]
    return out_ids, out_d


def recall_at_k(results, truth, k: int) -> float:
    """Mean over queries of |returned top-k ∩ true top-k| / k."""
    if len(results) != len(truth):
        raise ValueError("results and truth cover different query counts")
    if len(results) == 0:
        return 0.0
    hits = 0
    for r, t in zip(results, truth):
        hits += len(set(int(x) for x in list(r)[:k]) & set(int(x) for x in list(t)[:k]))
    return hits / (k * len(results))
