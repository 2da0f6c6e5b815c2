import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decoupled_ann.errors import DegreeOverflowError, DoubleDeleteError, PageError, UnknownNodeError
from decoupled_ann.pagestore import (
    PAGE_SIZE,
    SENTINEL,
    TopologyPage,
    TopologyRecord,
    create_store,
    open_store,
    record_size,
)

from conftest import scan_violations


def add_node(store, v, page=None, neighbors=()):
    node = store.append_vector(v)
    if page is None:
        page = store.new_topology_page()
    store.place_topology(node, page, neighbors)
    return node


def test_capacities():
    assert create_store(None, 960, 32).vec_capacity == 1
    s = create_store(None, 128, 32)
    assert s.vec_capacity == 8
    assert record_size(32) == 136
    assert s.topo_capacity == 30


def test_invalid_store_parameters():
    with pytest.raises(ValueError):
        create_store(None, 0, 32)
    with pytest.raises(ValueError):
        create_store(None, 2000, 32)


def test_record_layout_and_sentinel():
    rec = TopologyRecord(5, [1, 2, 3])
    raw = rec.to_bytes(32)
    assert len(raw) == 136
    words = np.frombuffer(raw, "<u4")
    assert words[0] == 5 and words[1] == 3
    assert (words[5:] == SENTINEL).all()
    assert TopologyRecord.from_bytes(raw) == rec
    with pytest.raises(DegreeOverflowError):
        TopologyRecord(1, np.arange(33)).to_bytes(32)


def test_single_node_read_costs_one_page():
    s = create_store(None, 8, 32)
    n = add_node(s, np.ones(8), neighbors=[])
    before = s.snapshot()
    rec, page = s.read_topology(n)
    assert rec.node_id == n and rec.neighbor_count == 0
    assert (s.snapshot() - before).topo_pages_read == 1
    assert len(page.to_bytes()) == PAGE_SIZE


def test_read_amplification_for_one_record():
    s = create_store(None, 128, 32)
    assert s.read_amplification() == pytest.approx(4096 / 132)
    assert round(s.read_amplification()) == 31


def test_co_located_record_comes_free_with_the_page():
    s = create_store(None, 8, 32)
    a = add_node(s, np.zeros(8))
    page = int(s.directory.topo_page[a])
    b = add_node(s, np.ones(8), page=page, neighbors=[a])
    before = s.snapshot()
    _, tp = s.read_topology(a)
    assert tp.record_of(b) == TopologyRecord(b, [a])
    assert (s.snapshot() - before).topo_pages_read == 1


def test_write_topology_charges_one_page_and_is_idempotent():
    s = create_store(None, 8, 32)
    a = add_node(s, np.zeros(8))
    b = add_node(s, np.ones(8))
    before = s.snapshot()
    s.write_topology(TopologyRecord(a, [b]))
    assert (s.snapshot() - before).bytes_written == 4096
    first = s._topo.page_bytes(int(s.directory.topo_page[a]))
    s.write_topology(TopologyRecord(a, [b]))
    assert s._topo.page_bytes(int(s.directory.topo_page[a])) == first
    assert (s.snapshot() - before).topo_pages_written == 2


def test_write_round_trip_is_byte_identical():
    s = create_store(None, 8, 32)
    nodes = [add_node(s, np.full(8, i)) for i in range(3)]
    rec = TopologyRecord(nodes[0], [nodes[2], nodes[1]])
    s.write_topology(rec)
    back, _ = s.read_topology(nodes[0])
    assert back.to_bytes(32) == rec.to_bytes(32)


def test_write_errors():
    s = create_store(None, 8, 4)
    a = add_node(s, np.zeros(8))
    with pytest.raises(DegreeOverflowError):
        s.write_topology(TopologyRecord(a, [0, 0, 0, 0, 0]))
    with pytest.raises(UnknownNodeError):
        s.write_topology(TopologyRecord(99, []))


def test_coupled_emulation_for_wide_vectors():
    s = create_store(None, 960, 32)
    assert s.coupled_capacity == 1
    page = s.new_topology_page()
    nodes = [add_node(s, np.zeros(960), page=page) for _ in range(10)]
    before = s.snapshot()
    # repair all ten co-located records in one page write
    s.write_topology_records([TopologyRecord(n, [nodes[0]]) for n in nodes[1:]] + [TopologyRecord(nodes[0], [])])
    delta = s.snapshot() - before
    assert delta.topo_pages_written <= math.ceil(10 / 30)
    assert delta.coupled_equiv_bytes == 10 * 4096


def test_read_vectors_batches_pages():
    s = create_store(None, 128, 32)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((24, 128)).astype(np.float32)
    ids = [s.append_vector(v) for v in x]
    before = s.snapshot()
    got = s.read_vectors(ids[:8])
    assert (s.snapshot() - before).vec_pages_read == 1
    np.testing.assert_array_equal(got, x[:8])
    order = [17, 2, 9, 3, 23, 16]
    before = s.snapshot()
    got = s.read_vectors(order)
    assert (s.snapshot() - before).vec_pages_read == 3
    np.testing.assert_array_equal(got, x[order])
    before = s.snapshot()
    assert s.read_vectors([]).shape == (0, 128)
    assert s.snapshot() == before


def test_first_append_goes_to_page_zero_slot_zero():
    s = create_store(None, 16, 32)
    n = s.append_vector(np.zeros(16))
    assert n == 0 and s.directory.vec_loc(0) == (0, 0)


def test_tombstone_errors():
    s = create_store(None, 16, 32)
    n = add_node(s, np.zeros(16))
    s.tombstone_vector(n)
    with pytest.raises(UnknownNodeError):
        s.read_vectors([n])
    with pytest.raises(DoubleDeleteError):
        s.tombstone_vector(n)
    with pytest.raises(UnknownNodeError):
        s.tombstone_vector(42)


def test_freed_slots_are_reused_only_after_release():
    s = create_store(None, 1024, 32)  # one vector per page
    a = add_node(s, np.zeros(1024))
    s.tombstone_vector(a)
    b = add_node(s, np.ones(1024))
    assert b != a and s.directory.vec_loc(b) != s.directory.vec_loc(a)
    s.clear_topology([a])
    s.release([a])
    c = add_node(s, np.full(1024, 2.0))
    assert c not in (a, b)
    assert s.directory.vec_loc(c) == (0, 0)


def test_unknown_topology_page():
    s = create_store(None, 8, 32)
    with pytest.raises(PageError):
        s.read_topology_page(3)


def test_page_serialization_is_4096_bytes():
    s = create_store(None, 8, 32)
    page = s.new_topology_page()
    tp = s.read_topology_page(page)
    assert len(tp.to_bytes()) == PAGE_SIZE
    assert TopologyPage.from_bytes(page, tp.to_bytes(), 32).size == 0


def test_save_and_reopen(tmp_path):
    base = tmp_path / "s"
    s = create_store(base, 16, 8)
    rng = np.random.default_rng(1)
    nodes = [add_node(s, rng.standard_normal(16)) for _ in range(5)]
    s.write_topology(TopologyRecord(nodes[0], nodes[1:3]))
    s.tombstone_vector(nodes[4])
    s.save()
    for ext in ("topo", "vec", "dir", "meta"):
        assert (tmp_path / f"s.{ext}").exists()
    raw = (tmp_path / "s.dir").read_bytes()
    magic, version, n_nodes, n_topo, n_vec, n_del = struct.unpack_from("<4sIIIII", raw)
    assert (magic, n_nodes, n_topo, n_vec, n_del) == (b"DGDR", 5, 5, 5, 1)
    triples = np.frombuffer(raw, "<u4", 3 * n_topo, 24).reshape(-1, 3)
    assert sorted(triples[:, 0].tolist()) == nodes
    t = open_store(base)
    assert t.stats == s.stats
    assert t.peek_neighbors(nodes[0]).tolist() == nodes[1:3]
    np.testing.assert_array_equal(t.peek_vectors(nodes), s.peek_vectors(nodes))
    assert t.directory.is_live(nodes[3]) and not t.directory.is_live(nodes[4])
    assert scan_violations(t) == []
    assert all(t._topo.page_bytes(p) == s._topo.page_bytes(p) for p in range(s.n_topo_pages))


ops = st.lists(st.tuples(st.sampled_from(["add", "add_here", "read", "write", "vec", "del"]),
                         st.integers(0, 10_000)), min_size=1, max_size=60)


@given(ops)
def test_random_operation_sequences_keep_store_consistent(seq):
    s = create_store(None, 8, 4)
    vecs = {}
    prev = s.snapshot()
    for op, r in seq:
        live = s.directory.live_nodes()
        if op in ("add", "add_here") or len(live) == 0:
            v = np.full(8, float(r), np.float32)
            page = None
            if op == "add_here" and s.n_topo_pages:
                cand = r % s.n_topo_pages
                if s.directory.topo_count[cand] < s.topo_capacity:
                    page = cand
            n = add_node(s, v, page=page)
            vecs[n] = v
        else:
            u = int(live[r % len(live)])
            if op == "read":
                rec, _ = s.read_topology(u)
                assert rec.node_id == u
            elif op == "write":
                nb = [int(x) for x in live[: r % 5]]
                s.write_topology(TopologyRecord(u, nb))
                assert s.peek_neighbors(u).tolist() == nb
            elif op == "vec":
                np.testing.assert_array_equal(s.read_vectors([u])[0], vecs[u])
            else:
                s.tombstone_vector(u)
        cur = s.snapshot()
        assert cur.bytes_read == 4096 * (cur.topo_pages_read + cur.vec_pages_read)
        for field in ("topo_pages_read", "topo_pages_written", "vec_pages_read", "vec_pages_written",
                      "coupled_equiv_bytes"):
            assert getattr(cur, field) >= getattr(prev, field)
        prev = cur
    assert scan_violations(s) == []
    for n, v in vecs.items():
        np.testing.assert_array_equal(s.peek_vectors([n])[0], v)


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 999)), min_size=1, max_size=80),
       st.sampled_from([8, 128, 960]))
def test_coupled_bytes_cover_single_node_topology_traffic(seq, dim):
    s = create_store(None, dim, 32)
    page = None
    nodes = []
    for _ in range(40):
        if page is None or s.directory.topo_count[page] == s.topo_capacity:
            page = s.new_topology_page()
        nodes.append(add_node(s, np.zeros(dim), page=page))
    before = s.snapshot()
    for write, r in seq:
        u = nodes[r % len(nodes)]
        if write:
            s.write_topology(TopologyRecord(u, [nodes[(r + 1) % len(nodes)]]))
        else:
            s.read_topology(u)
    delta = s.snapshot() - before
    assert delta.coupled_equiv_bytes >= delta.bytes_read + delta.bytes_written
