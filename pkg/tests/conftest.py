import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from decoupled_ann.graph import BuildParams, Index
from decoupled_ann.harness.datasets import synthetic_mixture

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")


def random_codebook(m, subdim, seed=0, pq_id=0):
    from decoupled_ann.quantizer import PQCodebook

    rng = np.random.default_rng(seed)
    return PQCodebook(pq_id=pq_id, centroids=rng.standard_normal((m, 256, subdim)).astype(np.float32))


def full_edge_scan(index):
    """Every (u, w) edge of every node still holding a topology record."""
    d = index.store.directory
    for u in d.graph_nodes():
        for w in index.store.peek_neighbors(int(u)):
            yield int(u), int(w)


@pytest.fixture(scope="session")
def small_data():
    return synthetic_mixture(2600, 32, clusters=16, seed=11)


@pytest.fixture(scope="session")
def small_index_factory(small_data):
    """Build a fresh 2 000-node index on demand (in memory)."""

    def make(**kw):
        params = kw.pop("params", BuildParams(R=16, L_build=40, MAX_C=80))
        n = kw.pop("n", 2000)
        return Index.build(small_data[:n], params, m=kw.pop("m", 8), seed=kw.pop("seed", 0), **kw)

    return make


@pytest.fixture(scope="session")
def small_index(small_index_factory):
    """Shared read-only index; tests that mutate must build their own."""
    return small_index_factory()


def scan_violations(store):
    """Rebuild both maps by scanning every page and compare with the directory.

    Returns a list of human-readable problems (empty when consistent).
    """
    from decoupled_ann.pagestore import DELETED, LIVE, PAGE_SIZE, TopologyPage

    d = store.directory
    bad = []
    topo_seen = {}
    for p in range(store.n_topo_pages):
        raw = store._topo.page_bytes(p)
        if len(raw) != PAGE_SIZE:
            bad.append(f"topology page {p} is {len(raw)} bytes")
        tp = TopologyPage.from_bytes(p, raw, store.R)
        if len(tp.to_bytes()) != PAGE_SIZE:
            bad.append(f"topology page {p} reserializes to {len(tp.to_bytes())} bytes")
        for s, rec in enumerate(tp.records):
            member = int(d.topo_members[p, s])
            if rec is None:
                if member != -1:
                    bad.append(f"directory puts {member} on empty slot ({p},{s})")
                continue
            n = rec.node_id
            if n in topo_seen:
                bad.append(f"node {n} has records at {topo_seen[n]} and ({p},{s})")
            topo_seen[n] = (p, s)
            if member != n or d.topo_loc(n) != (p, s):
                bad.append(f"node {n} found at ({p},{s}) but directory says {d.topo_loc(n)}")
            if rec.neighbor_count > store.R:
                bad.append(f"node {n} has degree {rec.neighbor_count}")
            if d.state[n] not in (LIVE, DELETED):
                bad.append(f"record of released node {n} at ({p},{s})")
    vec_seen = {}
    for p in range(store.n_vec_pages):
        for s in range(store.vec_capacity):
            n = int(d.vec_members[p, s])
            if n < 0:
                continue
            if n in vec_seen:
                bad.append(f"node {n} owns vector slots {vec_seen[n]} and ({p},{s})")
            vec_seen[n] = (p, s)
            if d.vec_loc(n) != (p, s):
                bad.append(f"vector of {n} at ({p},{s}) but directory says {d.vec_loc(n)}")
    graph = set(int(n) for n in d.graph_nodes())
    if set(topo_seen) != graph:
        bad.append(f"topology records {len(topo_seen)} vs graph nodes {len(graph)}")
    if set(vec_seen) != graph:
        bad.append(f"vector slots {len(vec_seen)} vs graph nodes {len(graph)}")
    return bad
