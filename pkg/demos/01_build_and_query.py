"""Build a small index, calibrate the rerank threshold and look at one query in detail.

    python demos/01_build_and_query.py
"""

import numpy as np

from decoupled_ann import query
from decoupled_ann.graph import Index
from decoupled_ann.harness.datasets import synthetic_mixture
from decoupled_ann.harness.groundtruth import brute_force_knn, recall_at_k

data = synthetic_mixture(10_200, 64, seed=3)
base, warm, tests = data[:10_000], data[10_000:10_100], data[10_100:]

index = Index.build(base)  # R=32, L_build=75, MAX_C=160, two quantizers
print(index.stats())
print(f"one topology record per page read costs {index.store.read_amplification():.0f}x its size")

warm_truth, _ = brute_force_knn(base, warm, 10)
test_truth, _ = brute_force_knn(base, tests, 10)

# T is the prefix depth that covers the true top-10 for 98% of warm-up queries
T = query.warmup_tau(index, warm, warm_truth, query.QueryParams(k=10, l=100))
p = query.QueryParams(k=10, l=100, tau_T=T)
print(f"calibrated T={T}; with l=100 each ordering contributes tau={p.rerank_budget()} candidates")

trace = query.QueryTrace()
top = query.search(index, tests[0], p, trace)
print("\none query, stage by stage")
print(f"  traversal expanded {trace.expanded} nodes, read {trace.topo_pages_read} topology pages,"
      f" {trace.buffer_hits} buffer hits")
print(f"  queue of {trace.queue_len}; two orderings -> {trace.refined} distinct candidates")
print(f"  exact rerank fetched {trace.vec_pages_read} vector pages")
print("  top-3:", [(n, round(d, 1)) for n, d in top[:3]])

for c in (1, 2):
    pc = query.QueryParams(k=10, l=100, tau_T=T, num_pqs=c)
    found = [[n for n, _ in query.search(index, q, pc)] for q in tests]
    print(f"\nrecall@10 with {c} quantizer(s): {recall_at_k(found, test_truth, 10):.3f}")

# 'how many candidates would I need' for 95% recall, one ordering vs two
for c in (1, 2):
    for tau in range(10, 101):
        pc = query.QueryParams(k=10, l=100, tau=tau, num_pqs=c)
        found = [[n for n, _ in query.search(index, q, pc)] for q in tests]
        if recall_at_k(found, test_truth, 10) >= 0.95:
            print(f"{c} ordering(s): tau={tau} reaches 0.95")
            break
    else:
        print(f"{c} ordering(s): 0.95 not reached at l=100")
