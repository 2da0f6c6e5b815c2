"""Disk-resident dynamic graph index with topology and vectors in separate page files."""

from .buffer import BufferPool, BufferStats, QueryContext
from .errors import ANNError
from .graph import BuildParams, CandidateQueue, Index, greedy_search, robust_prune
from .pagestore import IoStats, Store, TopologyPage, TopologyRecord, create_store, open_store
from .quantizer import PQCodebook, adc, batch_adc, distance_table, encode, train
from .query import QueryParams, QueryTrace, effective_tau, filter_candidates, search, warmup_tau
from .reorder import PlacementPolicy, place_node, split_page

__all__ = [
    "ANNError",
    "BufferPool",
    "BufferStats",
    "BuildParams",
    "CandidateQueue",
    "Index",
    "IoStats",
    "PQCodebook",
    "PlacementPolicy",
    "QueryContext",
    "QueryParams",
    "QueryTrace",
    "Store",
    "TopologyPage",
    "TopologyRecord",
    "adc",
    "batch_adc",
    "create_store",
    "distance_table",
    "effective_tau",
    "encode",
    "filter_candidates",
    "greedy_search",
    "open_store",
    "place_node",
    "robust_prune",
    "search",
    "split_page",
    "train",
    "warmup_tau",
]
