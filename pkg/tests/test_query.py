import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decoupled_ann import query
from decoupled_ann.errors import EmptyInputError
from decoupled_ann.graph import BuildParams, Index
from decoupled_ann.harness.groundtruth import brute_force_knn
from decoupled_ann.quantizer import PQCodebook
from decoupled_ann.query import (
    QueryParams,
    QueryTrace,
    cover_depth,
    effective_tau,
    filter_candidates,
    tau_from_depths,
    union_of_prefixes,
)


def as_arrays(*orders):
    return [np.array(o, dtype=np.int64) for o in orders]


def test_effective_tau_examples():
    assert effective_tau(100, 100) == 100
    assert effective_tau(100, 1000) == 200
    assert effective_tau(50, 500) == 100
    assert effective_tau(1, 1) == 1
    with pytest.raises(ValueError):
        effective_tau(0, 10)
    with pytest.raises(ValueError):
        effective_tau(11, 10)


@given(st.integers(1, 2000), st.integers(1, 2000))
def test_effective_tau_against_direct_formula(T, l):
    if T > l:
        T, l = l, T
    want = min(math.floor(T * (1 + math.log10(l / T)) + 0.5), l)
    got = effective_tau(T, l)
    assert got == want and T <= got <= l


def test_query_params_validation():
    for kw in ({"k": 0}, {"k": 10, "l": 5}, {"num_pqs": 0}, {"target_recall": 0.0},
               {"target_recall": 1.5}, {"tau": 3}, {"tau": 500}, {"tau_T": 0}, {"tau_T": 101}):
        with pytest.raises(ValueError):
            QueryParams(**kw)
    assert QueryParams(k=10, l=100).rerank_budget() == 100
    assert QueryParams(k=10, l=1000, tau_T=100).rerank_budget() == 200
    assert QueryParams(k=10, l=1000, tau_T=100, adjust_tau=False).rerank_budget() == 100
    assert QueryParams(k=10, l=100, tau_T=2).rerank_budget() == 10


def test_two_short_prefixes_cover_what_long_ones_need():
    # true top-3 = {1, 2, 3}; A alone needs 5, B alone needs 4, together 2 each
    a, b = as_arrays([1, 2, 7, 8, 3, 9, 4, 5, 6, 10], [3, 1, 9, 2, 7, 4, 5, 6, 8, 10])
    truth = [1, 2, 3]
    assert cover_depth([a], truth) == 5
    assert cover_depth([b], truth) == 4
    assert cover_depth([a, b], truth) == 2
    assert union_of_prefixes([a, b], 2).tolist() == [1, 2, 3]


def test_prefix_union_extremes():
    a, b = as_arrays([0, 1, 2, 3, 4, 5], [5, 4, 3, 2, 1, 0])
    assert union_of_prefixes([a, b], 6).tolist() == list(range(6))
    assert len(union_of_prefixes([a, b], 3)) == 6  # disjoint prefixes
    assert union_of_prefixes([a, a], 2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        union_of_prefixes([a], 0)
    with pytest.raises(ValueError):
        union_of_prefixes([a], 7)


def test_cover_depth_ignores_neighbors_missing_from_queue():
    (a,) = as_arrays([4, 5, 6])
    assert cover_depth([a], [5, 99]) == 2
    assert cover_depth([a], [99]) == 0


def test_percentile_calibration_example():
    depths = list(range(10, 101, 10))
    assert tau_from_depths(depths, 0.9, k=10, l=100) == 90
    assert tau_from_depths(depths, 1.0, k=10, l=100) == 100
    assert tau_from_depths([1, 1, 1], 0.98, k=10, l=100) == 10  # never below k
    with pytest.raises(EmptyInputError):
        tau_from_depths([], 0.9, k=10, l=100)


def test_filter_candidates_matches_manual_sort():
    rng = np.random.default_rng(3)
    cb = PQCodebook(pq_id=1, centroids=rng.standard_normal((2, 256, 3)).astype(np.float32))
    codes = rng.integers(0, 256, (50, 2), dtype=np.uint8)
    q = rng.standard_normal(6).astype(np.float32)
    queue = rng.permutation(50)[:20]
    decoded = cb.decode(codes[queue]).astype(np.float64)
    d = ((decoded - q) ** 2).sum(1)
    by_b = queue[np.lexsort((queue, d))]
    got = filter_candidates(queue, q, [(cb, codes)], 4)
    assert got.tolist() == sorted(set(queue[:4].tolist()) | set(by_b[:4].tolist()))


@pytest.fixture(scope="module")
def adversarial_index():
    """Ten points on a line. The traversal quantizer ranks them backwards, the second one exactly."""
    x = np.zeros((10, 2), np.float32)
    x[:, 0] = np.arange(10)
    cents = np.full((1, 256, 2), 1000.0, np.float32)
    cents[0, :10, 0] = np.arange(10)
    cents[0, :10, 1] = 0
    a = PQCodebook(pq_id=0, centroids=cents)
    b = PQCodebook(pq_id=1, centroids=cents.copy())
    idx = Index.build(x, BuildParams(R=9, L_build=10, MAX_C=20), m=1, pqs=[a, b])
    idx.codes[0][:10, 0] = 9 - np.arange(10)
    return idx


def test_second_ordering_rescues_adversarial_queue(adversarial_index):
    q = np.zeros(2, np.float32)
    trace = QueryTrace()
    two = query.search(adversarial_index, q, QueryParams(k=3, l=10, tau=3, num_pqs=1), trace)
    assert trace.orderings[0].tolist() == list(range(9, -1, -1))
    assert sorted(i for i, _ in two) == [7, 8, 9]
    three = query.search(adversarial_index, q, QueryParams(k=3, l=10, tau=3, num_pqs=2))
    assert [i for i, _ in three] == [0, 1, 2]
    assert [d for _, d in three] == [0.0, 1.0, 4.0]


def test_full_budget_one_quantizer_is_exact_rerank_of_queue(small_index, small_data):
    p = QueryParams(k=10, l=50, num_pqs=1)
    for q in small_data[2000:2020]:
        trace = QueryTrace()
        got = query.search(small_index, q, p, trace)
        queue = trace.orderings[0]
        assert trace.refined == len(queue)
        d = ((small_data[queue].astype(np.float64) - q) ** 2).sum(1)
        want = queue[np.lexsort((queue, d))][:10]
        assert [i for i, _ in got] == want.tolist()


def test_identical_quantizers_reduce_to_two_stage(small_index_factory, small_data):
    base = small_index_factory(n=800, num_pqs=1)
    cb = base.pqs[0]
    twin = small_index_factory(n=800, pqs=[cb, cb])
    for q in small_data[2000:2020]:
        p = QueryParams(k=10, l=60, tau=15)
        one = query.search(base, q, QueryParams(k=10, l=60, tau=15, num_pqs=1))
        assert query.search(twin, q, p) == one


def test_three_stage_contains_two_stage_and_recall_is_monotone(small_index, small_data):
    queries = small_data[2000:2060]
    truth, _ = brute_force_knn(small_data[:2000], queries, 10)
    prev = -1.0
    for tau in (10, 20, 40, 80):
        results = []
        for q in queries:
            t2, t3 = QueryTrace(), QueryTrace()
            query.search(small_index, q, QueryParams(k=10, l=80, tau=tau, num_pqs=1), t2)
            results.append([i for i, _ in query.search(small_index, q, QueryParams(k=10, l=80, tau=tau), t3)])
            two = set(union_of_prefixes(t2.orderings, tau).tolist())
            three = set(union_of_prefixes(t3.orderings, tau).tolist())
            assert two <= three
        recall = np.mean([len(set(r) & set(t.tolist())) / 10 for r, t in zip(results, truth)])
        assert recall >= prev
        prev = recall


def test_rerank_io_is_bounded_by_candidates(small_index, small_data):
    store = small_index.store
    for q in small_data[2000:2020]:
        trace = QueryTrace()
        before = store.snapshot()
        query.search(small_index, q, QueryParams(k=10, l=60, tau=15), trace)
        delta = store.snapshot() - before
        assert trace.refined <= 2 * 15
        assert delta.vec_pages_read == trace.vec_pages_read <= trace.refined


def test_warmup_tau_lands_in_range(small_index, small_data):
    queries = small_data[2100:2150]
    truth, _ = brute_force_knn(small_data[:2000], queries, 10)
    T = query.warmup_tau(small_index, queries, truth, QueryParams(k=10, l=80))
    assert 10 <= T <= 80
    lax = query.warmup_tau(small_index, queries, truth, QueryParams(k=10, l=80, target_recall=0.5))
    assert lax <= T


def test_concurrent_searches_equal_sequential(small_index, small_data):
    p = QueryParams(k=10, l=60, tau=20)
    queries = small_data[2000:2080]
    want = [query.search(small_index, q, p) for q in queries]
    with ThreadPoolExecutor(8) as pool:
        got = list(pool.map(lambda q: query.search(small_index, q, p), queries))
    assert got == want
    assert small_index.buffer.open_contexts == 0


def test_search_input_errors(small_index):
    with pytest.raises(ValueError):
        query.search(small_index, np.zeros(7), QueryParams())
    with pytest.raises(ValueError):
        query.search(small_index, np.zeros(small_index.dim), QueryParams(num_pqs=5))
