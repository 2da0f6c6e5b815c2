"""Three-stage top-k search and calibration of the rerank budget.

1. Greedy traversal under PQ-A distances fills a queue of length ``l``.
2. Each extra quantizer re-sorts the same queue members; the union of the
   first ``tau`` ids of every ordering is the refined candidate set.
3. The refined set's vectors are fetched in one batch and reranked exactly.

With one quantizer this is the plain two-stage search (traverse, then rerank
the first ``tau`` queue members).

``tau`` comes from a calibrated base threshold ``T`` (:func:`warmup_tau`),
widened for longer queues by :func:`effective_tau`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, quantizer
from .errors import EmptyInputError, EmptyIndexError
from .graph import Index
from .pagestore import LIVE


@dataclass(frozen=True)
class QueryParams:
    k: int = 10
    l: int = 100
    tau_T: int | None = None  # calibrated base threshold; None reranks the whole queue
    num_pqs: int = 2
    target_recall: float = 0.98
    adjust_tau: bool = True  # widen T with the queue length; off uses T itself
    tau: int | None = None  # explicit rerank budget, overrides tau_T

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l < self.k:
            raise ValueError(f"l={self.l} must be >= k={self.k}")
        if self.num_pqs < 1:
            raise ValueError("num_pqs must be >= 1")
        if not 0.0 < self.target_recall <= 1.0:
            raise ValueError("target_recall must be in (0, 1]")
        if self.tau is not None and not self.k <= self.tau <= self.l:
            raise ValueError(f"tau={self.tau} outside [k, l] = [{self.k}, {self.l}]")
        if self.tau_T is not None and not 1 <= self.tau_T <= self.l:
            raise ValueError(f"tau_T={self.tau_T} outside [1, l]")

    def rerank_budget(self) -> int:
        """Candidates taken from each ordering, clamped to [k, l]."""
        if self.tau is not None:
            tau = self.tau
        elif self.tau_T is None:
            tau = self.l
        elif self.adjust_tau:
            tau = effective_tau(self.tau_T, self.l)
        else:
            tau = self.tau_T
        return min(max(tau, self.k), self.l)


@dataclass
class QueryTrace:
    queue_len: int = 0
    expanded: int = 0
    tau: int = 0
    refined: int = 0
    topo_pages_read: int = 0
    vec_pages_read: int = 0
    buffer_hits: int = 0
    orderings: list = field(default_factory=list)


def effective_tau(T: int, l: int) -> int:
    """``min(T * (1 + log10(l / T)), l)`` rounded half up."""
    if T < 1:
        raise ValueError(f"T={T} must be >= 1")
    if T > l:
        raise ValueError(f"T={T} exceeds queue length l={l}")
    return min(int(math.floor(T * (1.0 + math.log10(l / T)) + 0.5)), l)


def pq_orderings(queue_ids: np.ndarray, tables, codes) -> list[np.ndarray]:
    """The queue in PQ-A order followed by one re-sort of its members per extra quantizer.

    ``tables[i]`` and ``codes[i]`` belong to extra quantizer ``i``; only the
    queue members' codes are scored.
    """
    queue_ids = np.asarray(queue_ids, dtype=np.int64)
    out = [queue_ids]
    for table, cds in zip(tables, codes):
        dists = quantizer.batch_adc(cds[queue_ids], table)
        out.append(queue_ids[np.lexsort((queue_ids, dists))])
    return out


def union_of_prefixes(orderings, tau: int) -> np.ndarray:
    n = len(orderings[0])
    if not 1 <= tau <= n:
        raise ValueError(f"tau={tau} outside [1, {n}]")
    return np.unique(np.concatenate([o[:tau] for o in orderings]))


def filter_candidates(queue_ids, q, pqs, tau: int) -> np.ndarray:
    """Union of the first ``tau`` ids of the PQ-A queue order and of each extra quantizer's re-sort.

    ``pqs`` is a list of ``(codebook, codes)`` pairs for the extra quantizers,
    where ``codes[node]`` is the node's code. Returns sorted ids.
    """
    tables = [quantizer.distance_table(q, cb) for cb, _ in pqs]
    return union_of_prefixes(pq_orderings(queue_ids, tables, [c for _, c in pqs]), tau)


def cover_depth(orderings, truth) -> int:
    """Shortest common prefix length whose union holds every true neighbor found in the queue.

    True neighbors the traversal never reached cannot be recovered by any
    prefix and are ignored; 0 when the queue holds none of them.
    """
    best: dict[int, int] = {}
    for o in orderings:
        for pos, node in enumerate(o.tolist()):
            if node not in best or pos < best[node]:
                best[node] = pos
    depths = [best[int(t)] + 1 for t in truth if int(t) in best]
    return max(depths) if depths else 0


def tau_from_depths(depths, target_recall: float, k: int, l: int) -> int:
    """Smallest T such that at least ``target_recall`` of the samples have depth <= T, clamped to [k, l]."""
    depths = sorted(int(d) for d in depths)
    if not depths:
        raise EmptyInputError("no cover depths to calibrate on")
    rank = max(1, math.ceil(target_recall * len(depths) - 1e-9))
    return int(min(max(depths[rank - 1], k), l))


def _stage_one(index: Index, q: np.ndarray, p: QueryParams, trace: QueryTrace | None):
    if index.entry is None:
        raise EmptyIndexError("index is empty")
    if p.num_pqs > len(index.pqs):
        raise ValueError(f"num_pqs={p.num_pqs} but the index holds {len(index.pqs)} quantizers")
    table = quantizer.distance_table(q, index.pqs[0])
    q_ids, _, vis_ids, _, hits, misses = index.pq_search(table, p.l)
    state = index.store.directory.state
    q_ids = q_ids[state[q_ids] == LIVE]
    if trace is not None:
        trace.queue_len = len(q_ids)
        trace.expanded = len(vis_ids)
        trace.topo_pages_read = misses
        trace.buffer_hits = hits
    extra = range(1, p.num_pqs)
    tables = [quantizer.distance_table(q, index.pqs[i]) for i in extra]
    orderings = pq_orderings(q_ids, tables, [index.codes[i] for i in extra])
    return orderings, vis_ids


def search(index: Index, q, params: QueryParams = QueryParams(), trace: QueryTrace | None = None):
    """Top-``k`` (node id, squared distance) pairs, closest first."""
    q = np.asarray(q, dtype=np.float32).ravel()
    if q.shape[0] != index.dim:
        raise ValueError(f"query dimension {q.shape[0]} != index dimension {index.dim}")
    with index.lock.read():
        orderings, vis_ids = _stage_one(index, q, params, trace)
        if len(orderings[0]) == 0:
            return []
        tau = min(params.rerank_budget(), len(orderings[0]))
        refined = union_of_prefixes(orderings, tau)
        store = index.store
        # a coupled layout already holds the vectors of expanded nodes
        vecs = store.read_vectors(refined, coupled_nodes=np.setdiff1d(refined, vis_ids, assume_unique=True))
        if trace is not None:
            trace.tau = tau
            trace.refined = len(refined)
            trace.vec_pages_read = len(np.unique(store.directory.vec_page[refined]))
            trace.orderings = orderings
    dists = _kernels.sq_dists(q, vecs)
    order = np.lexsort((refined, dists))[: params.k]
    return [(int(refined[i]), float(dists[i])) for i in order]


def warmup_tau(index: Index, sample_queries, truth, params: QueryParams = QueryParams()) -> int:
    """Calibrate the base threshold T on queries with known exact top-k.

    For each sample the queue orderings are built as in :func:`search`; its
    cover depth is the shortest prefix whose union holds every true neighbor
    the queue contains. T is the ``target_recall`` quantile of the depths.
    """
    sample_queries = np.asarray(sample_queries, dtype=np.float32)
    if sample_queries.ndim != 2 or len(sample_queries) == 0:
        raise EmptyInputError("warm-up needs at least one sample query")
    depths = []
    for q, t in zip(sample_queries, truth):
        with index.lock.read():
            orderings, _ = _stage_one(index, q, params, None)
        depths.append(cover_depth(orderings, np.asarray(t)[: params.k]))
    return tau_from_depths(depths, params.target_recall, params.k, params.l)
