"""Query-level buffer hit rate with neighbor-aware page placement versus a random shuffle.

Each search owns a small LRU of topology pages, emptied when it finishes, plus a
shared pinned region around the entry node. Placement puts a new node on the
page of its nearest neighbor, so one page read tends to serve several hops.

    python demos/03_page_locality.py
"""

import numpy as np

from decoupled_ann import query
from decoupled_ann.graph import Index
from decoupled_ann.harness.datasets import synthetic_mixture

data = synthetic_mixture(30_500, 64, seed=5)
base, queries = data[:30_000], data[30_000:]
index = Index.build(base)
store, d = index.store, index.store.directory
p = query.QueryParams(k=10, l=100)


def hit_rate():
    index.buffer.reset_stats()
    for q in queries:
        query.search(index, q, p)
    st = index.buffer.stats
    return st.hit_rate, st.pinned_hits / max(st.hits, 1)


placed, pinned_share = hit_rate()
print(f"placed: hit rate {placed:.3f} ({pinned_share:.0%} of hits from the pinned region)")

pages = {pg: d.topo_nodes_on(pg) for pg in range(store.n_topo_pages) if d.topo_count[pg]}
shuffled = np.random.default_rng(0).permutation(np.concatenate(list(pages.values())))
assignment, off = {}, 0
for pg, members in pages.items():
    assignment[pg] = shuffled[off:off + len(members)].tolist()
    off += len(members)
store.rewrite_topology_pages(assignment)
index.buffer.pin_entry_region(index.entry)

random, pinned_share = hit_rate()
print(f"random: hit rate {random:.3f} ({pinned_share:.0%} of hits from the pinned region)")
print(f"ratio {placed / random:.1f}x")
