"""Incremental similarity-aware placement of nodes into pages.

A new node goes to the page of its nearest existing node when that page has
room, otherwise to the first page with room among the pages of the next
nearest nodes. When every candidate page is full, the nearest node's page is
split in two, keeping graph neighbors together, and the new node joins the
nearest node's post-split page.

The same policy runs against the topology file and, optionally, against the
vector file; :class:`TopologyLayout` and :class:`VectorLayout` adapt the
store to the small interface the algorithm needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PageError
from .pagestore import Store


@dataclass(frozen=True)
class PlacementPolicy:
    top_n_pages: int = 3

    def __post_init__(self):
        if self.top_n_pages < 1:
            raise ValueError("top_n_pages must be >= 1")


class TopologyLayout:
    def __init__(self, store: Store):
        self.store = store

    @property
    def capacity(self) -> int:
        return self.store.topo_capacity

    def page_of(self, node: int) -> int:
        return int(self.store.directory.topo_page[node])

    def size(self, page: int) -> int:
        return int(self.store.directory.topo_count[page])

    def new_page(self) -> int:
        return self.store.new_topology_page()

    def insert(self, node: int, page: int, payload) -> None:
        self.store.place_topology(node, page, () if payload is None else payload)

    def load_for_split(self, page: int):
        tp = self.store.read_topology_page(page)
        nodes = tp.nodes()
        return nodes, {r.node_id: r.neighbors for r in tp.records if r is not None}

    def rewrite(self, assignment: dict[int, list[int]]) -> None:
        self.store.rewrite_topology_pages(assignment)


class VectorLayout:
    def __init__(self, store: Store):
        self.store = store

    @property
    def capacity(self) -> int:
        return self.store.vec_capacity

    def page_of(self, node: int) -> int:
        return int(self.store.directory.vec_page[node])

    def size(self, page: int) -> int:
        return int(self.store.directory.vec_count[page])

    def new_page(self) -> int:
        return self.store.new_vector_page()

    def insert(self, node: int, page: int, payload) -> None:
        self.store.append_vector(payload, page=page, node=node)

    def load_for_split(self, page: int):
        vp_nodes = self.store.directory.vec_nodes_on(page)
        self.store.read_vector_page(page)
        # similarity relation comes from the graph: fetch adjacency page by page
        d = self.store.directory
        by_page: dict[int, list[int]] = {}
        for n in vp_nodes:
            if d.topo_page[n] >= 0:
                by_page.setdefault(int(d.topo_page[n]), []).append(n)
        nbrs = {n: np.empty(0, dtype=np.uint32) for n in vp_nodes}
        for tpage, ns in by_page.items():
            tp = self.store.read_topology_page(tpage, charge_nodes=ns)
            for n in ns:
                nbrs[n] = tp.record_of(n).neighbors
        return vp_nodes, nbrs

    def rewrite(self, assignment: dict[int, list[int]]) -> None:
        self.store.rewrite_vector_pages(assignment)


def split_page(layout, page: int) -> tuple[int, int]:
    """Split a full page in two, letting each node pull its unassigned graph neighbors along.

    Nodes are visited in slot order. An unassigned node seeds the currently
    smaller page (the old page on ties); its neighbors from the same page
    follow it while the target holds fewer than half of the original nodes.
    """
    if layout.size(page) < layout.capacity:
        raise PageError(f"page {page} is not full")
    nodes, nbrs = layout.load_for_split(page)
    new_page = layout.new_page()
    members = set(nodes)
    half = len(nodes) / 2
    where: dict[int, int] = {}
    groups = {page: [], new_page: []}
    for u in nodes:
        if u not in where:
            target = page if len(groups[page]) <= len(groups[new_page]) else new_page
            where[u] = target
            groups[target].append(u)
        else:
            target = where[u]
        for w in nbrs.get(u, ()):
            w = int(w)
            if w in members and w not in where and len(groups[target]) < half:
                where[w] = target
                groups[target].append(w)
    layout.rewrite(groups)
    return page, new_page


def place_node(layout, new_node: int, nearest, payload=None, policy: PlacementPolicy = PlacementPolicy()) -> int:
    """Choose a page for ``new_node`` given existing nodes sorted nearest first; returns it.

    ``payload`` is what the layout writes for the node (its adjacency list or
    its vector). An empty ``nearest`` list is only valid for the first node
    and opens a fresh page.
    """
    nearest = [int(u) for u in nearest][: policy.top_n_pages]
    if not nearest:
        page = layout.new_page()
        layout.insert(new_node, page, payload)
        return page
    seen = []
    for u in nearest:
        p = layout.page_of(u)
        if p not in seen:
            seen.append(p)
    for p in seen:
        if layout.size(p) < layout.capacity:
            layout.insert(new_node, p, payload)
            return p
    _, fresh = split_page(layout, layout.page_of(nearest[0]))
    target = layout.page_of(nearest[0])
    if layout.size(target) >= layout.capacity:
        # single-slot pages cannot make room by splitting
        target = fresh
    layout.insert(new_node, target, payload)
    return target
