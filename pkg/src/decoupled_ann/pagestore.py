"""Decoupled on-disk storage: a topology page file and a vector page file.

Both files are arrays of 4096-byte pages. A topology page packs fixed-size
adjacency records ``[node_id, neighbor_count, R neighbor ids]`` (32-bit,
little-endian); empty slots carry the ``0xFFFFFFFF`` sentinel in every word.
A vector page packs ``floor(4096 / (4 * D))`` float32 vectors.

The in-memory :class:`Directory` maps every node to its slot in each file and
keeps the per-slot state needed for allocation. :class:`IoStats` counts every
page moved, plus the bytes an equivalent coupled layout (vector and adjacency
stored together per node, nodes laid out in id order) would have moved for
the same logical accesses.

Files on disk for a store named ``<name>``::

    <name>.topo   raw topology pages
    <name>.vec    raw vector pages
    <name>.dir    directory snapshot
    <name>.meta   JSON: dimensions, capacities, counters
"""

from __future__ import annotations

import heapq
import json
import math
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegreeOverflowError,
    DimensionMismatchError,
    DoubleDeleteError,
    MalformedRecordError,
    PageError,
    UnknownNodeError,
)

PAGE_SIZE = 4096
PAGE_WORDS = PAGE_SIZE // 4
SENTINEL = 0xFFFFFFFF

# node states in Directory.state; FREE covers never-used and consolidated ids
FREE, LIVE, DELETED, RESERVED = 0, 1, 2, 3

_DIR_MAGIC = b"DGDR"
_DIR_VERSION = 1
_DIR_HEADER = struct.Struct("<4sIIIII")


def record_words(R: int) -> int:
    return R + 2


def record_size(R: int) -> int:
    """Bytes per topology record: node id, neighbor count and R neighbor slots."""
    return 4 * record_words(R)


def topology_capacity(R: int) -> int:
    return PAGE_SIZE // record_size(R)


def vector_capacity(dim: int) -> int:
    return PAGE_SIZE // (4 * dim)


def coupled_capacity(dim: int, R: int) -> int:
    """Nodes per page if each vector were stored next to its adjacency record."""
    return PAGE_SIZE // (4 * dim + record_size(R))


# ---------------------------------------------------------------------------
# records and pages


@dataclass
class TopologyRecord:
    node_id: int
    neighbors: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint32))

    def __post_init__(self):
        self.neighbors = np.asarray(self.neighbors, dtype=np.uint32).ravel()

    @property
    def neighbor_count(self) -> int:
        return len(self.neighbors)

    def to_words(self, R: int) -> np.ndarray:
        if self.neighbor_count > R:
            raise DegreeOverflowError(f"node {self.node_id} has {self.neighbor_count} neighbors > R={R}")
        w = np.full(record_words(R), SENTINEL, dtype=np.uint32)
        w[0] = self.node_id
        w[1] = self.neighbor_count
        w[2:2 + self.neighbor_count] = self.neighbors
        return w

    def to_bytes(self, R: int) -> bytes:
        return self.to_words(R).astype("<u4").tobytes()

    @classmethod
    def from_words(cls, words) -> TopologyRecord | None:
        """Parse one record; returns None for an empty slot."""
        words = np.asarray(words, dtype=np.uint32)
        if words[0] == SENTINEL:
            return None
        count = int(words[1])
        if count > len(words) - 2:
            raise MalformedRecordError(f"record of node {int(words[0])} claims {count} neighbors")
        return cls(int(words[0]), words[2:2 + count].copy())

    @classmethod
    def from_bytes(cls, data: bytes) -> TopologyRecord | None:
        return cls.from_words(np.frombuffer(data, dtype="<u4"))

    def __eq__(self, other):
        if not isinstance(other, TopologyRecord):
            return NotImplemented
        return self.node_id == other.node_id and np.array_equal(self.neighbors, other.neighbors)


@dataclass
class TopologyPage:
    page_id: int
    R: int
    records: list  # TopologyRecord | None per slot

    @property
    def capacity(self) -> int:
        return topology_capacity(self.R)

    @property
    def occupancy(self) -> np.ndarray:
        return np.array([r is not None for r in self.records], dtype=bool)

    @property
    def size(self) -> int:
        return sum(r is not None for r in self.records)

    def nodes(self) -> list[int]:
        return [r.node_id for r in self.records if r is not None]

    def record_of(self, node: int) -> TopologyRecord | None:
        for r in self.records:
            if r is not None and r.node_id == node:
                return r
        return None

    def to_words(self) -> np.ndarray:
        rw = record_words(self.R)
        out = np.zeros(PAGE_WORDS, dtype=np.uint32)
        empty = np.full(rw, SENTINEL, dtype=np.uint32)
        empty[1] = 0
        for s, rec in enumerate(self.records):
            out[s * rw:(s + 1) * rw] = empty if rec is None else rec.to_words(self.R)
        return out

    def to_bytes(self) -> bytes:
        return self.to_words().astype("<u4").tobytes()

    @classmethod
    def from_words(cls, page_id: int, words, R: int) -> TopologyPage:
        words = np.asarray(words, dtype=np.uint32)
        rw = record_words(R)
        cap = topology_capacity(R)
        recs = [TopologyRecord.from_words(words[s * rw:(s + 1) * rw]) for s in range(cap)]
        return cls(page_id, R, recs)

    @classmethod
    def from_bytes(cls, page_id: int, data: bytes, R: int) -> TopologyPage:
        if len(data) != PAGE_SIZE:
            raise MalformedRecordError(f"topology page is {len(data)} bytes")
        return cls.from_words(page_id, np.frombuffer(data, dtype="<u4"), R)


@dataclass
class VectorPage:
    page_id: int
    vectors: np.ndarray  # (capacity, D) float32
    state: np.ndarray  # (capacity,) uint8: 0 free, 1 live, 2 tombstoned

    @property
    def capacity(self) -> int:
        return self.vectors.shape[0]

    def to_bytes(self) -> bytes:
        buf = np.zeros(PAGE_WORDS, dtype="<f4")
        flat = self.vectors.astype("<f4").ravel()
        buf[:flat.size] = flat
        return buf.tobytes()


# ---------------------------------------------------------------------------
# accounting


@dataclass
class IoStats:
    topo_pages_read: int = 0
    topo_pages_written: int = 0
    vec_pages_read: int = 0
    vec_pages_written: int = 0
    coupled_equiv_bytes: int = 0

    @property
    def bytes_read(self) -> int:
        return PAGE_SIZE * (self.topo_pages_read + self.vec_pages_read)

    @property
    def bytes_written(self) -> int:
        return PAGE_SIZE * (self.topo_pages_written + self.vec_pages_written)

    @property
    def bytes_moved(self) -> int:
        return self.bytes_read + self.bytes_written

    def copy(self) -> IoStats:
        return IoStats(**asdict(self))

    def __sub__(self, other: IoStats) -> IoStats:
        return IoStats(**{k: v - getattr(other, k) for k, v in asdict(self).items()})

    def __add__(self, other: IoStats) -> IoStats:
        return IoStats(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(bytes_read=self.bytes_read, bytes_written=self.bytes_written)
        return d


# ---------------------------------------------------------------------------
# page files


class _PageFile:
    """A growable array of 1024-word pages, memory-mapped when backed by a path."""

    def __init__(self, path: Path | None, dtype, n_pages: int = 0, create: bool = True):
        self.path = path
        self.dtype = np.dtype(dtype)
        self.n_pages = n_pages
        if path is None:
            self.array = np.zeros((max(16, n_pages), PAGE_WORDS), dtype=self.dtype)
            return
        if create:
            path.write_bytes(b"")
        alloc = max(16, n_pages)
        size = path.stat().st_size
        if size < alloc * PAGE_SIZE:
            with open(path, "r+b") as f:
                f.truncate(alloc * PAGE_SIZE)
        else:
            alloc = size // PAGE_SIZE
        self.array = np.memmap(path, dtype=self.dtype, mode="r+", shape=(alloc, PAGE_WORDS))

    @property
    def allocated(self) -> int:
        return self.array.shape[0]

    def grow(self, min_pages: int) -> None:
        if min_pages <= self.allocated:
            return
        new_alloc = max(min_pages, 2 * self.allocated)
        if self.path is None:
            arr = np.zeros((new_alloc, PAGE_WORDS), dtype=self.dtype)
            arr[: self.allocated] = self.array
            self.array = arr
            return
        self.array.flush()
        with open(self.path, "r+b") as f:
            f.truncate(new_alloc * PAGE_SIZE)
        self.array = np.memmap(self.path, dtype=self.dtype, mode="r+", shape=(new_alloc, PAGE_WORDS))

    def new_page(self, fill=0) -> int:
        pid = self.n_pages
        self.grow(pid + 1)
        self.array[pid] = fill
        self.n_pages += 1
        return pid

    def flush(self) -> None:
        if isinstance(self.array, np.memmap):
            self.array.flush()

    def page_bytes(self, pid: int) -> bytes:
        return self.array[pid].astype(self.dtype.newbyteorder("<")).tobytes()


# ---------------------------------------------------------------------------
# directory


class Directory:
    """node -> (page, slot) for both files, plus per-slot occupancy and free lists."""

    def __init__(self, topo_cap: int, vec_cap: int):
        self.topo_cap = topo_cap
        self.vec_cap = vec_cap
        self.n_nodes = 0
        n = 1024
        self.topo_page = np.full(n, -1, dtype=np.int32)
        self.topo_slot = np.full(n, -1, dtype=np.int32)
        self.vec_page = np.full(n, -1, dtype=np.int32)
        self.vec_slot = np.full(n, -1, dtype=np.int32)
        self.state = np.zeros(n, dtype=np.uint8)
        # inverse maps: page -> node per slot (-1 empty)
        self.topo_members = np.full((16, topo_cap), -1, dtype=np.int64)
        self.topo_count = np.zeros(16, dtype=np.int32)
        self.vec_members = np.full((16, vec_cap), -1, dtype=np.int64)
        self.vec_count = np.zeros(16, dtype=np.int32)
        self.vec_free: list[int] = []  # heap of page * vec_cap + slot

    # -- growth helpers
    def _ensure_nodes(self, n: int) -> None:
        if n <= len(self.state):
            return
        new = max(n, 2 * len(self.state))
        for name, fill in (("topo_page", -1), ("topo_slot", -1), ("vec_page", -1), ("vec_slot", -1), ("state", 0)):
            old = getattr(self, name)
            arr = np.full(new, fill, dtype=old.dtype)
            arr[: len(old)] = old
            setattr(self, name, arr)

    def _ensure_pages(self, which: str, n: int) -> None:
        members = getattr(self, f"{which}_members")
        if n <= members.shape[0]:
            return
        new = max(n, 2 * members.shape[0])
        m = np.full((new, members.shape[1]), -1, dtype=np.int64)
        m[: members.shape[0]] = members
        c = np.zeros(new, dtype=np.int32)
        old = getattr(self, f"{which}_count")
        c[: len(old)] = old
        setattr(self, f"{which}_members", m)
        setattr(self, f"{which}_count", c)

    # -- queries
    def is_live(self, node: int) -> bool:
        return 0 <= node < self.n_nodes and self.state[node] == LIVE

    def in_graph(self, node: int) -> bool:
        """Live or deleted-but-not-yet-consolidated."""
        return 0 <= node < self.n_nodes and self.state[node] in (LIVE, DELETED)

    def live_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.state[: self.n_nodes] == LIVE)

    def deleted_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.state[: self.n_nodes] == DELETED)

    def graph_nodes(self) -> np.ndarray:
        s = self.state[: self.n_nodes]
        return np.flatnonzero((s == LIVE) | (s == DELETED))

    def topo_loc(self, node: int) -> tuple[int, int]:
        return int(self.topo_page[node]), int(self.topo_slot[node])

    def vec_loc(self, node: int) -> tuple[int, int]:
        return int(self.vec_page[node]), int(self.vec_slot[node])

    def topo_nodes_on(self, page: int) -> list[int]:
        row = self.topo_members[page]
        return [int(x) for x in row[row >= 0]]

    def vec_nodes_on(self, page: int) -> list[int]:
        row = self.vec_members[page]
        return [int(x) for x in row[row >= 0]]

    # -- mutation
    def allocate(self) -> int:
        node = self.n_nodes
        self._ensure_nodes(node + 1)
        self.n_nodes += 1
        self.state[node] = LIVE
        return node

    def reserve(self, count: int) -> range:
        """Set aside fresh ids to be claimed later (bulk build assigns ids up front)."""
        start = self.n_nodes
        self._ensure_nodes(start + count)
        self.n_nodes += count
        self.state[start:start + count] = RESERVED
        return range(start, start + count)

    def claim(self, node: int) -> None:
        if not (0 <= node < self.n_nodes) or self.state[node] != RESERVED:
            raise UnknownNodeError(node)
        self.state[node] = LIVE

    def set_topo(self, node: int, page: int, slot: int) -> None:
        self._ensure_pages("topo", page + 1)
        old_p = self.topo_page[node]
        if old_p >= 0:
            self.topo_members[old_p, self.topo_slot[node]] = -1
            self.topo_count[old_p] -= 1
        self.topo_page[node] = page
        self.topo_slot[node] = slot
        if page >= 0:
            assert self.topo_members[page, slot] == -1
            self.topo_members[page, slot] = node
            self.topo_count[page] += 1

    def set_vec(self, node: int, page: int, slot: int) -> None:
        self._ensure_pages("vec", page + 1)
        old_p = self.vec_page[node]
        if old_p >= 0:
            self.vec_members[old_p, self.vec_slot[node]] = -1
            self.vec_count[old_p] -= 1
        self.vec_page[node] = page
        self.vec_slot[node] = slot
        if page >= 0:
            assert self.vec_members[page, slot] == -1
            self.vec_members[page, slot] = node
            self.vec_count[page] += 1

    def first_free_topo_slot(self, page: int) -> int:
        free = np.flatnonzero(self.topo_members[page] < 0)
        return int(free[0]) if len(free) else -1

    def first_free_vec_slot(self, page: int) -> int:
        free = np.flatnonzero(self.vec_members[page] < 0)
        return int(free[0]) if len(free) else -1

    def add_vec_page(self, page: int) -> None:
        self._ensure_pages("vec", page + 1)
        for s in range(self.vec_cap):
            heapq.heappush(self.vec_free, page * self.vec_cap + s)

    def pop_lowest_free_vec(self) -> tuple[int, int] | None:
        while self.vec_free:
            pos = heapq.heappop(self.vec_free)
            p, s = divmod(pos, self.vec_cap)
            if self.vec_members[p, s] < 0:
                return p, s
        return None

    # -- serialization
    def to_bytes(self) -> bytes:
        graph = self.graph_nodes()
        topo = np.array([(n, self.topo_page[n], self.topo_slot[n]) for n in graph if self.topo_page[n] >= 0],
                        dtype="<u4").reshape(-1, 3)
        vec = np.array([(n, self.vec_page[n], self.vec_slot[n]) for n in graph if self.vec_page[n] >= 0],
                       dtype="<u4").reshape(-1, 3)
        deleted = self.deleted_nodes().astype("<u4")
        header = _DIR_HEADER.pack(_DIR_MAGIC, _DIR_VERSION, self.n_nodes, len(topo), len(vec), len(deleted))
        return header + topo.tobytes() + vec.tobytes() + deleted.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, topo_cap: int, vec_cap: int, n_vec_pages: int) -> Directory:
        magic, version, n_nodes, n_topo, n_vec, n_del = _DIR_HEADER.unpack_from(data)
        if magic != _DIR_MAGIC or version != _DIR_VERSION:
            raise MalformedRecordError("not a directory snapshot")
        off = _DIR_HEADER.size
        need = off + 12 * (n_topo + n_vec) + 4 * n_del
        if len(data) != need:
            raise MalformedRecordError(f"directory snapshot is {len(data)} bytes, expected {need}")
        topo = np.frombuffer(data, "<u4", 3 * n_topo, off).reshape(-1, 3).astype(np.int64)
        off += 12 * n_topo
        vec = np.frombuffer(data, "<u4", 3 * n_vec, off).reshape(-1, 3).astype(np.int64)
        off += 12 * n_vec
        deleted = np.frombuffer(data, "<u4", n_del, off).astype(np.int64)
        d = cls(topo_cap, vec_cap)
        d._ensure_nodes(max(n_nodes, 1))
        d.n_nodes = n_nodes
        for n, p, s in topo:
            d.state[n] = LIVE
            d.set_topo(int(n), int(p), int(s))
        for n, p, s in vec:
            d.state[n] = LIVE
            d.set_vec(int(n), int(p), int(s))
        d.state[deleted] = DELETED
        d._ensure_pages("vec", n_vec_pages)
        for p in range(n_vec_pages):
            for s in range(vec_cap):
                if d.vec_members[p, s] < 0:
                    heapq.heappush(d.vec_free, p * vec_cap + s)
        return d


# ---------------------------------------------------------------------------
# store


class Store:
    """Owner of both page files, the directory and the I/O counters.

    Use :func:`create_store` / :func:`open_store` rather than the constructor.
    """

    def __init__(self, base: Path | None, dim: int, R: int, *, coupled_accounting: bool = True,
                 _topo: _PageFile | None = None, _vec: _PageFile | None = None,
                 _dir: Directory | None = None):
        self.base = base
        self.dim = dim
        self.R = R
        self.record_words = record_words(R)
        self.record_size = record_size(R)
        self.topo_capacity = topology_capacity(R)
        self.vec_capacity = vector_capacity(dim)
        self.coupled_capacity = coupled_capacity(dim, R)
        self.coupled_accounting = coupled_accounting
        self._topo = _topo if _topo is not None else _PageFile(self._file("topo"), np.uint32)
        self._vec = _vec if _vec is not None else _PageFile(self._file("vec"), np.float32)
        self.directory = _dir if _dir is not None else Directory(self.topo_capacity, self.vec_capacity)
        self.stats = IoStats()
        self.meta_extra: dict = {}
        self._stats_lock = threading.Lock()
        self._write_listeners: list = []

    def _file(self, ext: str) -> Path | None:
        return None if self.base is None else Path(f"{self.base}.{ext}")

    # -- raw views used by kernels
    @property
    def topo_words(self) -> np.ndarray:
        return self._topo.array

    @property
    def vec_words(self) -> np.ndarray:
        return self._vec.array

    @property
    def n_topo_pages(self) -> int:
        return self._topo.n_pages

    @property
    def n_vec_pages(self) -> int:
        return self._vec.n_pages

    def vector_view(self) -> np.ndarray:
        """(pages, capacity, D) view over the vector file, without accounting."""
        a = self._vec.array
        return a[:, : self.vec_capacity * self.dim].reshape(a.shape[0], self.vec_capacity, self.dim)

    def add_write_listener(self, fn) -> None:
        """``fn(page_id)`` is called after every topology page write."""
        self._write_listeners.append(fn)

    # -- accounting
    def coupled_pages(self, nodes) -> int:
        """Pages a coupled layout would touch to access ``nodes`` once each."""
        cc = self.coupled_capacity
        if len(nodes) <= 64:
            # small lists dominate; a set beats np.unique here
            if cc >= 1:
                return len({int(n) // cc for n in nodes})
            return math.ceil((4 * self.dim + self.record_size) / PAGE_SIZE) * len({int(n) for n in nodes})
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        if cc >= 1:
            return len(np.unique(nodes // cc))
        return math.ceil((4 * self.dim + self.record_size) / PAGE_SIZE) * len(nodes)

    def charge(self, *, topo_read=0, topo_written=0, vec_read=0, vec_written=0, coupled_pages=0) -> None:
        with self._stats_lock:
            s = self.stats
            s.topo_pages_read += topo_read
            s.topo_pages_written += topo_written
            s.vec_pages_read += vec_read
            s.vec_pages_written += vec_written
            if self.coupled_accounting:
                s.coupled_equiv_bytes += PAGE_SIZE * coupled_pages

    def snapshot(self) -> IoStats:
        with self._stats_lock:
            return self.stats.copy()

    def read_amplification(self, records_used: int = 1) -> float:
        """Bytes fetched per page over adjacency bytes actually used."""
        adjacency = (self.R + 1) * 4
        return PAGE_SIZE / (records_used * adjacency)

    # -- topology
    def _check_in_graph(self, node: int) -> None:
        if not self.directory.in_graph(node) or self.directory.topo_page[node] < 0:
            raise UnknownNodeError(node)

    def _record_words(self, node: int) -> np.ndarray:
        p, s = self.directory.topo_loc(node)
        rw = self.record_words
        return self._topo.array[p, s * rw:(s + 1) * rw]

    def peek_neighbors(self, node: int) -> np.ndarray:
        """Adjacency of ``node`` straight from the file, without accounting (oracles only)."""
        w = self._record_words(node)
        return w[2:2 + int(w[1])].astype(np.int64)

    def new_topology_page(self) -> int:
        empty = np.full(PAGE_WORDS, SENTINEL, dtype=np.uint32)
        rw = self.record_words
        for s in range(self.topo_capacity):
            empty[s * rw + 1] = 0
        empty[self.topo_capacity * rw:] = 0
        pid = self._topo.new_page(empty)
        self.directory._ensure_pages("topo", pid + 1)
        return pid

    def _check_topo_page(self, page: int) -> None:
        if not 0 <= page < self._topo.n_pages:
            raise PageError(f"unknown topology page {page}")

    def read_topology_page(self, page: int, *, charge_nodes=None) -> TopologyPage:
        """Read one whole topology page (one page read)."""
        self._check_topo_page(page)
        tp = TopologyPage.from_words(page, self._topo.array[page], self.R)
        nodes = tp.nodes() if charge_nodes is None else charge_nodes
        self.charge(topo_read=1, coupled_pages=self.coupled_pages(nodes))
        return tp

    def read_adjacency(self, page: int, nodes=None, *, charge_nodes=None) -> dict[int, np.ndarray]:
        """One page read returning the neighbor ids of ``nodes`` (every record on the page by default).

        Same accounting as :meth:`read_topology_page` without materializing
        record objects for the whole page.
        """
        self._check_topo_page(page)
        d = self.directory
        if nodes is None:
            nodes = d.topo_nodes_on(page)
        row = self._topo.array[page]
        rw = self.record_words
        out = {}
        for n in nodes:
            n = int(n)
            if not 0 <= n < d.n_nodes or d.topo_page[n] != page:
                raise UnknownNodeError(n)
            b = int(d.topo_slot[n]) * rw
            out[n] = row[b + 2:b + 2 + int(row[b + 1])].astype(np.int64)
        self.charge(topo_read=1, coupled_pages=self.coupled_pages(nodes if charge_nodes is None else charge_nodes))
        return out

    def read_topology(self, node: int) -> tuple[TopologyRecord, TopologyPage]:
        self._check_in_graph(node)
        page = int(self.directory.topo_page[node])
        tp = self.read_topology_page(page, charge_nodes=[node])
        return tp.record_of(node), tp

    def place_topology(self, node: int, page: int, neighbors=()) -> int:
        """Put ``node``'s record into the first free slot of ``page``; returns the slot."""
        self._check_topo_page(page)
        slot = self.directory.first_free_topo_slot(page)
        if slot < 0:
            raise PageError(f"topology page {page} is full")
        self.directory.set_topo(node, page, slot)
        self._write_record(TopologyRecord(node, neighbors))
        self.charge(topo_written=1, coupled_pages=self.coupled_pages([node]))
        self._notify(page)
        return slot

    def _write_record(self, rec: TopologyRecord) -> None:
        p, s = self.directory.topo_loc(rec.node_id)
        rw = self.record_words
        self._topo.array[p, s * rw:(s + 1) * rw] = rec.to_words(self.R)

    def write_topology(self, rec: TopologyRecord) -> None:
        self._check_in_graph(rec.node_id)
        if rec.neighbor_count > self.R:
            raise DegreeOverflowError(f"node {rec.node_id}: {rec.neighbor_count} neighbors > R={self.R}")
        self._write_record(rec)
        self.charge(topo_written=1, coupled_pages=self.coupled_pages([rec.node_id]))
        self._notify(int(self.directory.topo_page[rec.node_id]))

    def write_topology_records(self, records, *, page: int | None = None, clear=(), coupled_nodes=None) -> None:
        """Rewrite records sharing one page, and empty the slots of ``clear``, as a single page write.

        ``coupled_nodes`` overrides which nodes the coupled-layout emulation
        charges for (callers that batch coupled charges pass an empty list).
        """
        records = list(records)
        clear = [int(n) for n in clear]
        if not records and not clear:
            return
        d = self.directory
        pages = {int(d.topo_page[r.node_id]) for r in records} | {int(d.topo_page[n]) for n in clear}
        if len(pages) != 1 or (page is not None and pages != {page}):
            raise PageError(f"records span pages {sorted(pages)}")
        for r in records:
            self._check_in_graph(r.node_id)
            if r.neighbor_count > self.R:
                raise DegreeOverflowError(f"node {r.node_id}: {r.neighbor_count} neighbors > R={self.R}")
        for r in records:
            self._write_record(r)
        rw = self.record_words
        for n in clear:
            p, s = d.topo_loc(n)
            row = self._topo.array[p, s * rw:(s + 1) * rw]
            row[:] = SENTINEL
            row[1] = 0
            d.set_topo(n, -1, -1)
        if coupled_nodes is None:
            coupled_nodes = [r.node_id for r in records] + clear
        self.charge(topo_written=1, coupled_pages=self.coupled_pages(coupled_nodes))
        self._notify(pages.pop())

    def commit_topology_pages(self, pages, *, coupled_nodes=()) -> None:
        """Account for pages a compiled kernel read and rewrote in place (one read and one write each)."""
        pages = [int(p) for p in pages]
        for p in pages:
            self._check_topo_page(p)
        cp = self.coupled_pages(coupled_nodes)
        # the coupled layout reads and writes the same node pages
        self.charge(topo_read=len(pages), topo_written=len(pages), coupled_pages=2 * cp)
        for p in pages:
            self._notify(p)

    def rewrite_topology_pages(self, assignment: dict[int, list[int]]) -> None:
        """Repack whole pages: ``assignment[page]`` lists nodes in slot order.

        Records are taken from their current locations, so nodes may move
        between the given pages. Each page counts as one write.
        """
        rw = self.record_words
        saved = {n: self._record_words(n).copy() for nodes in assignment.values() for n in nodes}
        for page, nodes in assignment.items():
            self._check_topo_page(page)
            if len(nodes) > self.topo_capacity:
                raise PageError(f"{len(nodes)} records do not fit on page {page}")
        d = self.directory
        for nodes in assignment.values():
            for n in nodes:
                d.set_topo(n, -1, -1)
        for page, nodes in assignment.items():
            row = self._topo.array[page]
            row[: self.topo_capacity * rw] = SENTINEL
            for s in range(self.topo_capacity):
                row[s * rw + 1] = 0
            for s, n in enumerate(nodes):
                row[s * rw:(s + 1) * rw] = saved[n]
                d.set_topo(n, page, s)
        moved = [n for nodes in assignment.values() for n in nodes]
        self.charge(topo_written=len(assignment), coupled_pages=self.coupled_pages(moved))
        for page in assignment:
            self._notify(page)

    def clear_topology(self, nodes) -> None:
        """Drop records of ``nodes`` from their pages; one write per page touched."""
        by_page: dict[int, list[int]] = {}
        for n in nodes:
            by_page.setdefault(int(self.directory.topo_page[n]), []).append(int(n))
        for page, ns in by_page.items():
            self.write_topology_records((), page=page, clear=ns)

    def _notify(self, page: int) -> None:
        for fn in self._write_listeners:
            fn(page)

    # -- vectors
    def new_vector_page(self) -> int:
        pid = self._vec.new_page(0)
        self.directory.add_vec_page(pid)
        return pid

    def append_vector(self, v, *, page: int | None = None, node: int | None = None) -> int:
        """Store ``v``; returns its node id.

        Without ``page`` the lowest free (page, slot) is used. Ids are never
        reused: a fresh one is allocated unless ``node`` names an id obtained
        from :meth:`allocate_node`.
        """
        v = np.asarray(v, dtype=np.float32).ravel()
        if v.shape[0] != self.dim:
            raise DimensionMismatchError(f"vector dimension {v.shape[0]} != {self.dim}")
        d = self.directory
        if page is None:
            loc = d.pop_lowest_free_vec()
            if loc is None:
                self.new_vector_page()
                loc = d.pop_lowest_free_vec()
            page, slot = loc
        else:
            if not 0 <= page < self._vec.n_pages:
                raise PageError(f"unknown vector page {page}")
            slot = d.first_free_vec_slot(page)
            if slot < 0:
                raise PageError(f"vector page {page} is full")
        if node is None:
            node = d.allocate()
        d.set_vec(node, page, slot)
        self.vector_view()[page, slot] = v
        self.charge(vec_written=1, coupled_pages=self.coupled_pages([node]))
        return node

    def allocate_node(self, reserved: int | None = None) -> int:
        """A fresh live node id, or claim one set aside by ``directory.reserve``."""
        if reserved is None:
            return self.directory.allocate()
        self.directory.claim(reserved)
        return reserved

    def tombstone_vector(self, node: int) -> None:
        d = self.directory
        # ids are never reused, so a FREE id below n_nodes was deleted and consolidated
        if 0 <= node < d.n_nodes and d.state[node] in (DELETED, FREE):
            raise DoubleDeleteError(node)
        if not d.is_live(node):
            raise UnknownNodeError(node)
        d.state[node] = DELETED
        self.charge(vec_written=1, coupled_pages=self.coupled_pages([node]))

    def read_vectors(self, nodes, *, coupled_nodes=None) -> np.ndarray:
        """Fetch vectors of live ``nodes`` in input order with one batch of page reads.

        ``coupled_nodes`` names the subset a coupled layout would still have
        to fetch (callers pass the nodes whose pages they did not already read).
        """
        nodes = np.asarray(nodes, dtype=np.int64).ravel()
        if len(nodes) == 0:
            return np.empty((0, self.dim), dtype=np.float32)
        d = self.directory
        bad = (nodes < 0) | (nodes >= d.n_nodes)
        if bad.any():
            raise UnknownNodeError(int(nodes[bad][0]))
        not_live = d.state[nodes] != LIVE
        if not_live.any():
            raise UnknownNodeError(int(nodes[not_live][0]))
        pages = d.vec_page[nodes]
        out = self.vector_view()[pages, d.vec_slot[nodes]].copy()
        if coupled_nodes is None:
            coupled_nodes = nodes
        self.charge(vec_read=len(np.unique(pages)), coupled_pages=self.coupled_pages(coupled_nodes))
        return out

    def peek_vectors(self, nodes) -> np.ndarray:
        """Vectors of nodes still in the graph (including tombstoned), without accounting."""
        nodes = np.asarray(nodes, dtype=np.int64)
        d = self.directory
        return self.vector_view()[d.vec_page[nodes], d.vec_slot[nodes]]

    def read_vector_page(self, page: int) -> VectorPage:
        if not 0 <= page < self._vec.n_pages:
            raise PageError(f"unknown vector page {page}")
        d = self.directory
        members = d.vec_members[page]
        state = np.zeros(self.vec_capacity, dtype=np.uint8)
        for s, n in enumerate(members):
            if n >= 0:
                state[s] = d.state[n]
        nodes = [int(n) for n in members if n >= 0]
        self.charge(vec_read=1, coupled_pages=self.coupled_pages(nodes))
        return VectorPage(page, self.vector_view()[page].copy(), state)

    def rewrite_vector_pages(self, assignment: dict[int, list[int]]) -> None:
        """Repack vector pages; same contract as :meth:`rewrite_topology_pages`."""
        view = self.vector_view()
        d = self.directory
        saved = {n: view[d.vec_page[n], d.vec_slot[n]].copy() for ns in assignment.values() for n in ns}
        for page, ns in assignment.items():
            if len(ns) > self.vec_capacity:
                raise PageError(f"{len(ns)} vectors do not fit on page {page}")
        for ns in assignment.values():
            for n in ns:
                d.set_vec(n, -1, -1)
        for page, ns in assignment.items():
            view[page] = 0
            for s, n in enumerate(ns):
                view[page, s] = saved[n]
                d.set_vec(n, page, s)
            for s in range(len(ns), self.vec_capacity):
                heapq.heappush(d.vec_free, page * self.vec_capacity + s)
        moved = [n for ns in assignment.values() for n in ns]
        self.charge(vec_written=len(assignment), coupled_pages=self.coupled_pages(moved))

    def release(self, nodes) -> None:
        """Return vector slots of consolidated nodes to the free list (topology already cleared)."""
        d = self.directory
        for n in nodes:
            n = int(n)
            p, s = d.vec_loc(n)
            if p >= 0:
                d.set_vec(n, -1, -1)
                heapq.heappush(d.vec_free, p * self.vec_capacity + s)
            d.state[n] = FREE

    # -- persistence
    def save(self) -> None:
        if self.base is None:
            return
        self._topo.flush()
        self._vec.flush()
        self._file("dir").write_bytes(self.directory.to_bytes())
        meta = {
            "dim": self.dim,
            "R": self.R,
            "record_size": self.record_size,
            "topo_capacity": self.topo_capacity,
            "vec_capacity": self.vec_capacity,
            "coupled_capacity": self.coupled_capacity,
            "n_topo_pages": self._topo.n_pages,
            "n_vec_pages": self._vec.n_pages,
            "coupled_accounting": self.coupled_accounting,
            "stats": asdict(self.stats),
            "extra": self.meta_extra,
        }
        self._file("meta").write_text(json.dumps(meta, indent=1))

    def close(self) -> None:
        self.save()


def create_store(path, dim: int, R: int, *, coupled_accounting: bool = True) -> Store:
    """Create an empty store. ``path`` is the file stem, or None for an in-memory store."""
    if dim < 1 or R < 1:
        raise ValueError(f"invalid store parameters D={dim} R={R}")
    if vector_capacity(dim) < 1:
        raise ValueError(f"a {dim}-dimensional vector does not fit in one page")
    if topology_capacity(R) < 1:
        raise ValueError(f"a record with R={R} does not fit in one page")
    base = None if path is None else Path(path)
    if base is not None:
        base.parent.mkdir(parents=True, exist_ok=True)
    store = Store(base, dim, R, coupled_accounting=coupled_accounting)
    store.save()
    return store


def open_store(path) -> Store:
    base = Path(path)
    meta_path = Path(f"{base}.meta")
    if not meta_path.exists():
        raise FileNotFoundError(meta_path)
    meta = json.loads(meta_path.read_text())
    dim, R = meta["dim"], meta["R"]
    topo = _PageFile(Path(f"{base}.topo"), np.uint32, meta["n_topo_pages"], create=False)
    vec = _PageFile(Path(f"{base}.vec"), np.float32, meta["n_vec_pages"], create=False)
    directory = Directory.from_bytes(Path(f"{base}.dir").read_bytes(), topology_capacity(R),
                                     vector_capacity(dim), meta["n_vec_pages"])
    directory._ensure_pages("topo", meta["n_topo_pages"])
    store = Store(base, dim, R, coupled_accounting=meta["coupled_accounting"], _topo=topo, _vec=vec,
                  _dir=directory)
    store.stats = IoStats(**meta["stats"])
    store.meta_extra = meta.get("extra", {})
    return store
