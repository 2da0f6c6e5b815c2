"""Query-scoped topology page buffer with a pinned region around the entry node.

Every search owns a :class:`QueryContext`: pages it fetches stay cached for
the rest of that search (LRU within a page budget) and are all dropped when
the search ends. A small set of pages reachable first from the entry node is
pinned for the pool's lifetime and served to every context. Vector pages are
never buffered.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass

import numpy as np

from .errors import ClosedContextError, EmptyIndexError
from .pagestore import PAGE_SIZE, Store, TopologyPage

DEFAULT_CONTEXT_PAGES = 64
DEFAULT_PINNED_PAGES = 256


@dataclass
class BufferStats:
    hits: int = 0
    misses: int = 0
    pinned_hits: int = 0

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0


class QueryContext:
    def __init__(self, ctx_id: int, budget: int):
        self.ctx_id = ctx_id
        self.budget = budget
        self.pages: OrderedDict[int, TopologyPage] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.pinned_hits = 0
        self.closed = False

    @property
    def resident_bytes(self) -> int:
        return PAGE_SIZE * len(self.pages)


class BufferPool:
    def __init__(self, store: Store, context_pages: int = DEFAULT_CONTEXT_PAGES,
                 pinned_pages: int = DEFAULT_PINNED_PAGES):
        self.store = store
        self.context_pages = context_pages
        self.pinned_budget = pinned_pages
        self.pinned: dict[int, TopologyPage] = {}
        self._mask: np.ndarray | None = None
        self.stats = BufferStats()
        self._ids = itertools.count()
        self._open: dict[int, QueryContext] = {}
        self._lock = threading.Lock()
        store.add_write_listener(self._on_page_written)

    # -- contexts
    def open_context(self) -> QueryContext:
        ctx = QueryContext(next(self._ids), self.context_pages)
        with self._lock:
            self._open[ctx.ctx_id] = ctx
        return ctx

    def get_page(self, ctx: QueryContext, page: int, for_node: int | None = None) -> TopologyPage:
        if ctx.closed:
            raise ClosedContextError(f"context {ctx.ctx_id} already ended")
        tp = self.pinned.get(page)
        if tp is not None:
            ctx.hits += 1
            ctx.pinned_hits += 1
            return tp
        tp = ctx.pages.get(page)
        if tp is not None:
            ctx.hits += 1
            ctx.pages.move_to_end(page)
            return tp
        ctx.misses += 1
        charge = None if for_node is None else [for_node]
        tp = self.store.read_topology_page(page, charge_nodes=charge)
        ctx.pages[page] = tp
        if len(ctx.pages) > ctx.budget:
            ctx.pages.popitem(last=False)
        return tp

    def neighbors(self, ctx: QueryContext, node: int) -> np.ndarray:
        """Adjacency of ``node`` served through ``ctx``."""
        page = int(self.store.directory.topo_page[node])
        rec = self.get_page(ctx, page, for_node=node).record_of(node)
        return rec.neighbors.astype(np.int64)

    def end_query(self, ctx: QueryContext) -> None:
        if ctx.closed:
            raise ClosedContextError(f"context {ctx.ctx_id} already ended")
        ctx.pages.clear()
        ctx.closed = True
        with self._lock:
            self._open.pop(ctx.ctx_id, None)
            self.stats.hits += ctx.hits
            self.stats.misses += ctx.misses
            self.stats.pinned_hits += ctx.pinned_hits

    def record(self, hits: int, misses: int, pinned_hits: int) -> None:
        """Fold counters of a search run by a compiled kernel with the same policy."""
        with self._lock:
            self.stats.hits += hits
            self.stats.misses += misses
            self.stats.pinned_hits += pinned_hits

    def reset_stats(self) -> None:
        with self._lock:
            self.stats = BufferStats()

    def resident_bytes(self) -> int:
        with self._lock:
            ctxs = list(self._open.values())
        return sum(c.resident_bytes for c in ctxs) + PAGE_SIZE * len(self.pinned)

    @property
    def open_contexts(self) -> int:
        return len(self._open)

    # -- pinned region
    def pin_entry_region(self, entry: int | None, k_pages: int | None = None) -> list[int]:
        """Pin the first ``k_pages`` distinct pages met by a BFS from ``entry``."""
        k_pages = self.pinned_budget if k_pages is None else min(k_pages, self.pinned_budget)
        self.pinned = {}
        self._mask = None
        if k_pages <= 0:
            return []
        d = self.store.directory
        if entry is None or not d.in_graph(entry):
            raise EmptyIndexError("no entry node to pin around")
        seen = {entry}
        frontier = deque([entry])
        while frontier and len(self.pinned) < k_pages:
            u = frontier.popleft()
            page = int(d.topo_page[u])
            tp = self.pinned.get(page)
            if tp is None:
                tp = self.store.read_topology_page(page)
                self.pinned[page] = tp
                self._mask = None
            for w in tp.record_of(u).neighbors:
                w = int(w)
                if w not in seen:
                    seen.add(w)
                    frontier.append(w)
        return list(self.pinned)

    def pinned_mask(self) -> np.ndarray:
        """Boolean per topology page, for the compiled search kernel."""
        n = max(self.store.n_topo_pages, 1)
        mask = self._mask
        if mask is None or len(mask) < n:
            mask = np.zeros(max(n, 2 * (0 if mask is None else len(mask))), dtype=np.bool_)
            for p in self.pinned:
                mask[p] = True
            self._mask = mask
        return mask

    def _on_page_written(self, page: int) -> None:
        # keep pinned copies current; the writer already has the new bytes
        if page in self.pinned:
            words = self.store.topo_words[page]
            self.pinned[page] = TopologyPage.from_words(page, words, self.store.R)
