"""Bounded-degree proximity graph stored in the decoupled page files.

:class:`Index` ties the pieces together: the :class:`~decoupled_ann.pagestore.Store`
holding adjacency and vectors, one or more product quantizers whose codes
stay in memory, the query buffer and the page placement policy.

Traversal runs on PQ distances of the first quantizer. New nodes pick their
neighbors from the traversal pool after an exact-distance rerank; repairs of
existing adjacency lists (reverse edges overflowing ``R``, consolidation after
deletes) work on the quantizer reconstructions by default so that topology
maintenance never has to read the vector file.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels, quantizer
from ._sync import RWLock
from .buffer import DEFAULT_CONTEXT_PAGES, DEFAULT_PINNED_PAGES, BufferPool
from .errors import (
    DimensionMismatchError,
    DoubleDeleteError,
    EmptyIndexError,
    EmptyInputError,
    StoreFullError,
    UnknownNodeError,
)
from .pagestore import DELETED, SENTINEL, IoStats, Store, TopologyRecord, create_store, open_store
from .reorder import PlacementPolicy, TopologyLayout, VectorLayout, place_node

DEFAULT_CONSOLIDATE_EVERY = 0.001


# ---------------------------------------------------------------------------
# generic search and prune (reference versions; the index uses compiled twins)


class CandidateQueue:
    """Distance-sorted queue of at most ``capacity`` entries; ties go to the lower id."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self._keys: list[tuple[float, int]] = []
        self._visited: set[int] = set()
        self._exact: set[int] = set()
        self._members: set[int] = set()

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, node: int) -> bool:
        return node in self._members

    def push(self, node: int, dist: float, exact: bool = False) -> None:
        bisect.insort(self._keys, (dist, node))
        self._members.add(node)
        if exact:
            self._exact.add(node)

    def truncate(self) -> None:
        while len(self._keys) > self.capacity:
            _, node = self._keys.pop()
            self._members.discard(node)
            self._visited.discard(node)
            self._exact.discard(node)

    def closest_unvisited(self) -> int | None:
        for _, node in self._keys:
            if node not in self._visited:
                return node
        return None

    def mark_visited(self, node: int) -> None:
        self._visited.add(node)

    def is_visited(self, node: int) -> bool:
        return node in self._visited

    def is_exact(self, node: int) -> bool:
        return node in self._exact

    def ids(self) -> np.ndarray:
        return np.array([n for _, n in self._keys], dtype=np.int64)

    def dists(self) -> np.ndarray:
        return np.array([d for d, _ in self._keys])

    def entries(self) -> list[tuple[int, float, bool, bool]]:
        return [(n, d, n in self._visited, n in self._exact) for d, n in self._keys]


def greedy_search(entry: int, l: int, dist, neighbors, *, exact: bool = False):
    """Best-first search from ``entry`` keeping the ``l`` closest candidates.

    ``dist(node)`` gives the distance of a node to the query and
    ``neighbors(node)`` its out-neighbors. Expands the closest unexpanded
    candidate until every queued candidate has been expanded. Returns the
    queue and the expanded nodes in expansion order.
    """
    queue = CandidateQueue(l)
    queue.push(entry, dist(entry), exact)
    expanded: list[int] = []
    done: set[int] = set()
    while True:
        p = queue.closest_unvisited()
        if p is None:
            break
        queue.mark_visited(p)
        expanded.append(p)
        done.add(p)
        for w in neighbors(p):
            w = int(w)
            if w in queue or w in done:
                continue
            queue.push(w, dist(w), exact)
        queue.truncate()
    return queue, expanded


@dataclass(frozen=True)
class BuildParams:
    R: int = 32
    L_build: int = 75
    MAX_C: int = 160
    alpha: float = 1.2
    exact_repair: bool = False  # prune existing lists on exact vectors instead of PQ reconstructions

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.L_build < self.R:
            raise ValueError(f"L_build={self.L_build} must be >= R={self.R}")
        if self.MAX_C < self.L_build:
            raise ValueError(f"MAX_C={self.MAX_C} must be >= L_build={self.L_build}")
        if not self.alpha >= 1.0:
            raise ValueError("alpha must be >= 1")


def robust_prune(p, pool, params: BuildParams, dist) -> list[int]:
    """Alpha-rule pruning of ``pool`` (pairs of node and distance to ``p``) down to ``params.R`` ids.

    ``dist(a, b)`` is the distance between two pool members. Candidates are
    taken closest first; each kept candidate ``v`` removes every ``u`` with
    ``alpha * dist(v, u) <= dist(p, u)``.
    """
    remaining = sorted(((float(d), int(u)) for u, d in pool if int(u) != p))
    out: list[int] = []
    while remaining and len(out) < params.R:
        _, v = remaining.pop(0)
        out.append(v)
        remaining = [(du, u) for du, u in remaining if params.alpha * dist(v, u) > du]
    return out


# ---------------------------------------------------------------------------
# index


@dataclass
class IndexStats:
    live: int
    deleted: int
    mean_degree: float
    max_degree: int
    topo_pages: int
    vec_pages: int
    entry: int | None


@dataclass
class ConsolidateReport:
    removed: int
    repaired: int
    pages_written: int
    io: IoStats


def default_m(dim: int) -> int:
    """Subspace count: the smallest slice width >= 4 that divides ``dim`` with at most 64 slices."""
    for sub in range(4, dim + 1):
        if dim % sub == 0 and dim // sub <= 64:
            return dim // sub
    return 1


def _pad_codes(codes: np.ndarray, n: int) -> np.ndarray:
    if n <= codes.shape[0]:
        return codes
    out = np.zeros((max(n, 2 * codes.shape[0], 16), codes.shape[1]), dtype=np.uint8)
    out[: codes.shape[0]] = codes
    return out


class Index:
    """Dynamic graph index over a decoupled store.

    Create with :meth:`build`, :meth:`create` or :meth:`open`. Updates take an
    index-wide writer lock; searches (see :mod:`decoupled_ann.query`) take the
    reader side.
    """

    def __init__(self, store: Store, pqs: list[quantizer.PQCodebook], params: BuildParams = BuildParams(),
                 *, codes: list[np.ndarray] | None = None, entry: int | None = None,
                 context_pages: int = DEFAULT_CONTEXT_PAGES, pinned_pages: int = DEFAULT_PINNED_PAGES,
                 vector_layout: bool = False, consolidate_every: float | None = DEFAULT_CONSOLIDATE_EVERY,
                 policy: PlacementPolicy = PlacementPolicy()):
        if not pqs:
            raise ValueError("at least one quantizer is required")
        if params.R != store.R:
            raise ValueError(f"params.R={params.R} but the store was created with R={store.R}")
        for cb in pqs:
            if cb.dim != store.dim:
                raise DimensionMismatchError(f"codebook dimension {cb.dim} != store dimension {store.dim}")
        self.store = store
        self.pqs = list(pqs)
        self.params = params
        n = max(store.directory.n_nodes, 16)
        if codes is None:
            codes = [np.zeros((n, cb.m), dtype=np.uint8) for cb in self.pqs]
        self.codes = [_pad_codes(np.ascontiguousarray(c, dtype=np.uint8), n) for c in codes]
        self.entry = entry
        self.tau_T: int | None = None  # calibrated rerank threshold, kept with the index
        self.buffer = BufferPool(store, context_pages, pinned_pages)
        self.vector_layout = vector_layout
        self.consolidate_every = consolidate_every
        self.policy = policy
        self.lock = RWLock()
        self._topo_layout = TopologyLayout(store)
        self._vec_layout = VectorLayout(store)
        self._pending_deletes = int(len(store.directory.deleted_nodes()))
        self._sdc = self.pqs[0].centroid_distances()

    # -- construction
    @classmethod
    def create(cls, path, dim: int, pqs, params: BuildParams = BuildParams(), *,
               coupled_accounting: bool = True, **kwargs) -> Index:
        store = create_store(path, dim, params.R, coupled_accounting=coupled_accounting)
        return cls(store, pqs, params, **kwargs)

    @classmethod
    def build(cls, vectors, params: BuildParams = BuildParams(), *, path=None, m: int | None = None,
              num_pqs: int = 2, seed: int = 0, pq_train_size: int = 20000, pqs=None,
              coupled_accounting: bool = True, progress=None, **kwargs) -> Index:
        """Train the quantizers and insert ``vectors`` one by one in a seeded random order.

        Node ids equal row positions in ``vectors``. The entry node is the node
        nearest the dataset mean, fixed once every row is inserted.
        """
        x = np.ascontiguousarray(np.asarray(vectors, dtype=np.float32))
        if x.ndim != 2 or x.shape[0] == 0:
            raise EmptyInputError("build needs a non-empty 2-d array of vectors")
        n, dim = x.shape
        rng = np.random.default_rng(seed)
        if pqs is None:
            m = default_m(dim) if m is None else m
            sample = x if n <= pq_train_size else x[np.sort(rng.choice(n, pq_train_size, replace=False))]
            seeds = np.random.SeedSequence(seed).spawn(num_pqs)
            pqs = [quantizer.train(sample, m, pq_id=i, seed=int(s.generate_state(1)[0]))
                   for i, s in enumerate(seeds)]
        codes = [quantizer.encode_batch(x, cb) for cb in pqs]
        index = cls.create(path, dim, pqs, params, coupled_accounting=coupled_accounting, **kwargs)
        with index.lock.write():
            index.store.directory.reserve(n)
            for c in range(len(index.codes)):
                index.codes[c] = _pad_codes(index.codes[c], n)
                index.codes[c][:n] = codes[c]
            order = rng.permutation(n)
            for i, node in enumerate(order):
                index._insert(x[node], node=int(node))
                if progress is not None:
                    progress(i + 1, n)
            index.entry = _nearest_to_mean(x)
            index.buffer.pin_entry_region(index.entry)
        return index

    @classmethod
    def open(cls, path, **kwargs) -> Index:
        store = open_store(path)
        extra = store.meta_extra
        params = BuildParams(**extra["params"])
        pqs = [quantizer.PQCodebook.load(f"{path}.pq{i}") for i in range(extra["num_pqs"])]
        n = store.directory.n_nodes
        codes = []
        for i, cb in enumerate(pqs):
            raw = np.fromfile(f"{path}.codes{i}", dtype=np.uint8)
            codes.append(raw.reshape(n, cb.m) if n else np.zeros((0, cb.m), dtype=np.uint8))
        opts = dict(context_pages=extra["context_pages"], pinned_pages=extra["pinned_pages"],
                    vector_layout=extra["vector_layout"], consolidate_every=extra["consolidate_every"])
        opts.update(kwargs)
        index = cls(store, pqs, params, codes=codes, entry=extra["entry"], **opts)
        index.tau_T = extra.get("tau_T")
        if index.entry is not None:
            index.buffer.pin_entry_region(index.entry)
        return index

    def save(self) -> None:
        base = self.store.base
        if base is None:
            return
        with self.lock.read():
            n = self.store.directory.n_nodes
            for i, cb in enumerate(self.pqs):
                cb.save(f"{base}.pq{i}")
                self.codes[i][:n].tofile(f"{base}.codes{i}")
            self.store.meta_extra = {
                "entry": self.entry,
                "params": asdict(self.params),
                "num_pqs": len(self.pqs),
                "context_pages": self.buffer.context_pages,
                "pinned_pages": self.buffer.pinned_budget,
                "vector_layout": self.vector_layout,
                "consolidate_every": self.consolidate_every,
                "tau_T": self.tau_T,
            }
            self.store.save()

    def close(self) -> None:
        self.save()

    # -- properties
    @property
    def dim(self) -> int:
        return self.store.dim

    @property
    def n_nodes(self) -> int:
        return self.store.directory.n_nodes

    def __len__(self) -> int:
        return int(len(self.store.directory.live_nodes()))

    def is_deleted(self, node: int) -> bool:
        d = self.store.directory
        return 0 <= node < d.n_nodes and d.state[node] == DELETED

    def neighbors(self, node: int) -> np.ndarray:
        """Adjacency straight from the topology file, without accounting."""
        if not self.store.directory.in_graph(node):
            raise UnknownNodeError(node)
        return self.store.peek_neighbors(node)

    def stats(self) -> IndexStats:
        d = self.store.directory
        live = d.live_nodes()
        degs = np.array([len(self.store.peek_neighbors(int(u))) for u in live], dtype=np.int64)
        return IndexStats(
            live=int(len(live)),
            deleted=int(len(d.deleted_nodes())),
            mean_degree=float(degs.mean()) if len(degs) else 0.0,
            max_degree=int(degs.max()) if len(degs) else 0,
            topo_pages=self.store.n_topo_pages,
            vec_pages=self.store.n_vec_pages,
            entry=self.entry,
        )

    # -- searching
    def pq_search(self, table: np.ndarray, l: int, *, fold_stats: bool = True):
        """Traverse under PQ-A distances through a per-search buffer.

        Returns (queue ids, queue distances, expanded ids, expanded distances,
        buffer hits, buffer misses). Topology reads are charged to the store; buffer
        counters are folded into the pool's stats when ``fold_stats``.
        """
        if self.entry is None:
            raise EmptyIndexError("index is empty")
        if l < 1:
            raise ValueError("l must be >= 1")
        d = self.store.directory
        q_ids, q_d, vis_ids, vis_d, hits, misses, pinned = _kernels.pq_greedy_search(
            self.store.topo_words, self.store.record_words, d.topo_page, d.topo_slot,
            self.codes[0], table, self.entry, l, self.buffer.pinned_mask(),
            self.buffer.context_pages, d.n_nodes)
        # a coupled layout fetches each expanded node's page (adjacency and vector) once
        self.store.charge(topo_read=misses, coupled_pages=self.store.coupled_pages(vis_ids))
        if fold_stats:
            self.buffer.record(hits, misses, pinned)
        return q_ids, q_d, vis_ids, vis_d, hits, misses

    def reference_search(self, q, l: int, *, exact: bool = False):
        """Pure-Python traversal through :class:`BufferPool`; the behavioral definition of :meth:`pq_search`."""
        if self.entry is None:
            raise EmptyIndexError("index is empty")
        q = np.asarray(q, dtype=np.float32)
        if exact:
            def dist(u):
                diff = self.store.peek_vectors([u])[0].astype(np.float64) - q
                return float(diff @ diff)
        else:
            table = quantizer.distance_table(q, self.pqs[0])
            codes = self.codes[0]

            def dist(u):
                return quantizer.adc(codes[u], table)
        ctx = self.buffer.open_context()
        try:
            return greedy_search(self.entry, l, dist, lambda u: self.buffer.neighbors(ctx, u), exact=exact)
        finally:
            self.buffer.end_query(ctx)

    # -- helpers
    def _repair_list(self, u: int, cands: np.ndarray) -> np.ndarray:
        """Prune an existing node's candidate list back to ``R``."""
        cands = np.asarray(cands[cands != u], dtype=np.int64)
        p = self.params
        if not p.exact_repair:
            return _kernels.sdc_prune(u, cands, self.codes[0], self._sdc, p.R, p.MAX_C, p.alpha)
        vecs = self.store.read_vectors(np.concatenate(([u], cands)))
        dists = _kernels.sq_dists(vecs[0], vecs[1:])
        order = np.lexsort((cands, dists))[: p.MAX_C]
        keep = _kernels.robust_prune(vecs[1:][order], dists[order], p.R, p.alpha)
        return cands[order][keep]

    def _ensure_code_rows(self, n: int) -> None:
        for i in range(len(self.codes)):
            self.codes[i] = _pad_codes(self.codes[i], n)

    # -- updates
    def insert(self, v) -> int:
        v = np.asarray(v, dtype=np.float32).ravel()
        if v.shape[0] != self.dim:
            raise DimensionMismatchError(f"vector dimension {v.shape[0]} != index dimension {self.dim}")
        with self.lock.write():
            if self.store.directory.n_nodes >= SENTINEL - 1:
                raise StoreFullError("node id space exhausted")
            return self._insert(v)

    def _insert(self, v: np.ndarray, node: int | None = None) -> int:
        store = self.store
        d = store.directory
        if node is None:
            node = store.allocate_node()
            self._ensure_code_rows(node + 1)
            for i, cb in enumerate(self.pqs):
                self.codes[i][node] = quantizer.encode(v, cb)
        else:
            store.allocate_node(reserved=node)
        R = self.params.R

        if self.entry is None:
            place_node(self._topo_layout, node, [], (), self.policy)
            self._place_vector(node, v, [])
            self.entry = node
            return node

        table = quantizer.distance_table(v, self.pqs[0])
        q_ids, _, vis_ids, _, _, _ = self.pq_search(table, self.params.L_build, fold_stats=False)
        # visited already covers the final queue; keep the union for clarity
        pool = np.unique(np.concatenate((vis_ids, q_ids)))
        pool = pool[(pool != node) & (d.state[pool] != DELETED)]
        if len(pool):
            pq_d = quantizer.batch_adc(self.codes[0][pool], table)
            pool = pool[np.lexsort((pool, pq_d))][: self.params.MAX_C]
            # the traversal already fetched the expanded nodes' pages in a coupled layout
            vecs = store.read_vectors(pool, coupled_nodes=np.setdiff1d(pool, vis_ids))
            dists = _kernels.sq_dists(v, vecs)
            order = np.lexsort((pool, dists))
            pool, vecs, dists = pool[order], vecs[order], dists[order]
            chosen = pool[_kernels.robust_prune(vecs, dists, R, self.params.alpha)]
            nearest = pool[: self.policy.top_n_pages]
        else:
            chosen = np.empty(0, dtype=np.int64)
            nearest = chosen

        place_node(self._topo_layout, node, nearest, chosen, self.policy)
        self._place_vector(node, v, nearest)
        self._add_reverse_edges(node, chosen)
        return node

    def _place_vector(self, node: int, v: np.ndarray, nearest) -> None:
        if self.vector_layout:
            place_node(self._vec_layout, node, nearest, v, self.policy)
        else:
            self.store.append_vector(v, node=node)

    def _add_reverse_edges(self, node: int, chosen: np.ndarray) -> None:
        if not len(chosen):
            return
        if self.params.exact_repair:
            self._add_reverse_edges_py(node, chosen)
            return
        store = self.store
        d = store.directory
        chosen = np.asarray(chosen, dtype=np.int64)
        _kernels.add_reverse_edges(store.topo_words, store.record_words, self.params.R, self.params.MAX_C,
                                   self.params.alpha, d.topo_page, d.topo_slot, d.state, DELETED, node,
                                   chosen, self.codes[0], self._sdc)
        store.commit_topology_pages(np.unique(d.topo_page[chosen]), coupled_nodes=chosen)

    def _add_reverse_edges_py(self, node: int, chosen: np.ndarray) -> None:
        store = self.store
        d = store.directory
        R = self.params.R
        by_page: dict[int, list[int]] = {}
        for u in chosen:
            by_page.setdefault(int(d.topo_page[u]), []).append(int(u))
        for page, us in by_page.items():
            adj = store.read_adjacency(page, us)
            recs = []
            for u in us:
                nb = adj[u]
                if len(nb) < R:
                    new = np.append(nb, node)
                else:
                    cands = np.append(nb, node)
                    cands = cands[d.state[cands] != DELETED]
                    new = cands if len(cands) <= R else self._repair_list(u, cands)
                recs.append(TopologyRecord(u, new))
            store.write_topology_records(recs, page=page)

    def delete(self, node: int) -> None:
        with self.lock.write():
            self.store.tombstone_vector(node)
            self._pending_deletes += 1
            every = self.consolidate_every
            if every is not None:
                live = len(self.store.directory.live_nodes())
                if self._pending_deletes >= max(1, math.ceil(every * (live + self._pending_deletes))):
                    self._consolidate()

    def consolidate_deletes(self) -> ConsolidateReport:
        with self.lock.write():
            return self._consolidate()

    def _consolidate(self) -> ConsolidateReport:
        """Reroute edges around deleted nodes, drop their records and free their slots.

        Every topology page holding records is read once. A live node that
        pointed at deleted nodes takes over their live out-neighbors and is
        pruned back to ``R`` when the merged list overflows. Each changed page
        is written once, with its deleted records cleared in the same write.
        """
        store = self.store
        d = store.directory
        before = store.snapshot()
        dead = d.deleted_nodes()
        self._pending_deletes = 0
        if len(dead) == 0:
            return ConsolidateReport(0, 0, 0, store.snapshot() - before)
        is_dead = np.zeros(d.n_nodes, dtype=bool)
        is_dead[dead] = True
        graph_nodes = d.graph_nodes()

        pages = np.flatnonzero(d.topo_count[: store.n_topo_pages] > 0)
        contents = {}
        dead_adj: dict[int, np.ndarray] = {}
        for p in pages:
            adj = store.read_adjacency(int(p), charge_nodes=())
            contents[int(p)] = adj
            for u, nb in adj.items():
                if is_dead[u]:
                    dead_adj[u] = nb
        # a coupled layout scans every node's page once
        store.charge(coupled_pages=store.coupled_pages(graph_nodes))

        R = self.params.R
        touched: list[int] = []
        repaired = 0
        pages_written = 0
        for p, adj in contents.items():
            recs = []
            clear = []
            for u, nb in adj.items():
                if is_dead[u]:
                    clear.append(u)
                    continue
                gone = is_dead[nb]
                if not gone.any():
                    continue
                parts = [nb[~gone]] + [dead_adj[int(w)] for w in nb[gone]]
                cands = np.unique(np.concatenate(parts))
                cands = cands[(cands != u) & ~is_dead[cands]]
                if len(cands) > R:
                    cands = self._repair_list(u, cands)
                recs.append(TopologyRecord(u, cands))
            if recs or clear:
                store.write_topology_records(recs, page=p, clear=clear, coupled_nodes=())
                pages_written += 1
                repaired += len(recs)
                touched.extend(r.node_id for r in recs)
                touched.extend(clear)
        store.charge(coupled_pages=store.coupled_pages(touched))

        store.release(dead)
        self.entry = self._central_node()
        if self.entry is None:
            self.buffer.pin_entry_region(None, 0)
        else:
            self.buffer.pin_entry_region(self.entry)
        return ConsolidateReport(int(len(dead)), repaired, pages_written, store.snapshot() - before)

    def _central_node(self) -> int | None:
        """Live node whose PQ-A code is closest to the mean of the live reconstructions."""
        live = self.store.directory.live_nodes()
        if len(live) == 0:
            return None
        cb = self.pqs[0]
        codes = self.codes[0][live]
        mean = np.empty(cb.dim, dtype=np.float64)
        for j in range(cb.m):
            counts = np.bincount(codes[:, j], minlength=256).astype(np.float64)
            mean[j * cb.subdim:(j + 1) * cb.subdim] = counts @ cb.centroids[j] / len(live)
        dists = quantizer.batch_adc(codes, quantizer.distance_table(mean, cb))
        return int(live[int(np.argmin(dists))])


def _nearest_to_mean(x: np.ndarray, chunk: int = 65536) -> int:
    mean = x.mean(axis=0, dtype=np.float64)
    best, best_d = 0, np.inf
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk].astype(np.float64) - mean
        dd = np.einsum("nd,nd->n", diff, diff)
        i = int(np.argmin(dd))
        if dd[i] < best_d:
            best, best_d = s + i, float(dd[i])
    return best
