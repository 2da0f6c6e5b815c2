"""Product quantization: training, encoding and asymmetric distances.

Each vector of dimension ``D`` is split into ``m`` contiguous slices of
``subdim = D // m`` components. Every slice is replaced by the index of its
nearest centroid among 256 learned per-subspace centroids, so a code is
``m`` unsigned bytes.

Several quantizers trained on the same data with different seeds are used by
the query engine to re-rank one candidate queue in independent orders; the
``pq_id`` field names which one a codebook is (0 for the traversal quantizer,
1, 2, ... for the filtering ones).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DimensionMismatchError, EmptyInputError, MalformedRecordError

NUM_CENTROIDS = 256
CODEBOOK_MAGIC = b"DGPQ"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class PQCodebook:
    """Per-subspace centroid tables of one product quantizer.

    ``centroids`` has shape ``(m, 256, subdim)`` and dtype float32.
    """

    pq_id: int
    centroids: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 3 or c.shape[1] != NUM_CENTROIDS:
            raise ValueError(f"centroids must have shape (m, 256, subdim), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def subdim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.subdim

    @property
    def code_size(self) -> int:
        """Bytes per encoded vector."""
        return self.m

    def encode(self, v) -> np.ndarray:
        return encode(v, self)

    def encode_batch(self, vectors) -> np.ndarray:
        return encode_batch(vectors, self)

    def distance_table(self, q) -> np.ndarray:
        return distance_table(q, self)

    def decode(self, code) -> np.ndarray:
        """Concatenate the centroids a code points at."""
        code = np.asarray(code)
        if code.shape[-1] != self.m:
            raise DimensionMismatchError(f"code length {code.shape[-1]} != m={self.m}")
        parts = self.centroids[np.arange(self.m), code]
        return parts.reshape(*code.shape[:-1], self.dim)

    def centroid_distances(self) -> np.ndarray:
        """(m, 256, 256) float64 squared distances between centroids of each subspace."""
        c = self.centroids.astype(np.float64)
        diff = c[:, :, None, :] - c[:, None, :, :]
        return np.einsum("mabd,mabd->mab", diff, diff)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.pq_id, self.dim, self.m)
        return header + self.centroids.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> PQCodebook:
        if len(data) < _HEADER.size:
            raise MalformedRecordError("codebook file shorter than its header")
        magic, version, pq_id, dim, m = _HEADER.unpack_from(data)
        if magic != CODEBOOK_MAGIC:
            raise MalformedRecordError(f"bad codebook magic {magic!r}")
        if version != CODEBOOK_VERSION:
            raise MalformedRecordError(f"unsupported codebook version {version}")
        if m == 0 or dim % m:
            raise MalformedRecordError(f"inconsistent codebook header D={dim} m={m}")
        subdim = dim // m
        expected = _HEADER.size + m * NUM_CENTROIDS * subdim * 4
        if len(data) != expected:
            raise MalformedRecordError(f"codebook payload is {len(data)} bytes, expected {expected}")
        flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
        return cls(pq_id=pq_id, centroids=flat.reshape(m, NUM_CENTROIDS, subdim))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> PQCodebook:
        return cls.from_bytes(Path(path).read_bytes())


def _as_matrix(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-d array of vectors, got shape {x.shape}")
    return x


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # fewer distinct points than k; cannot happen after the distinct-count check
            centers[i:] = centers[0]
            break
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        idx = min(idx, n - 1)
        centers[i] = x[idx]
        np.minimum(d2, ((x - centers[i]) ** 2).sum(1), out=d2)
    return centers


def _assign(x: np.ndarray, centers: np.ndarray):
    labels = np.empty(x.shape[0], dtype=np.int64)
    best = np.empty(x.shape[0], dtype=np.float64)
    _kernels.nearest_centroid(x, centers, labels, best)
    return labels, float(best.sum())


def kmeans(x, k: int = NUM_CENTROIDS, seed: int = 0, max_iter: int = 25, tol: float = 1e-4) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding.

    Stops after ``max_iter`` iterations or once the relative inertia change
    drops below ``tol``. When ``x`` holds at most ``k`` distinct rows the
    distinct rows are returned, repeated cyclically to fill ``k`` slots.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyInputError("k-means needs at least one point")
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] <= k:
        return np.resize(distinct, (k, x.shape[1])).astype(np.float32)

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    prev = None
    for _ in range(max_iter):
        labels, inertia = _assign(x, centers)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if prev is not None and prev > 0 and (prev - inertia) / prev < tol:
            break
        prev = inertia
    return centers.astype(np.float32)


def train(vectors, m: int, pq_id: int = 0, seed: int = 0, max_iter: int = 25, tol: float = 1e-4) -> PQCodebook:
    """Train one product quantizer with ``m`` subspaces of 256 centroids each."""
    x = _as_matrix(vectors)
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise EmptyInputError("cannot train a quantizer on an empty set")
    dim = x.shape[1]
    if m <= 0 or dim % m:
        raise DimensionMismatchError(f"dimension {dim} is not divisible by m={m}")
    subdim = dim // m
    centroids = np.empty((m, NUM_CENTROIDS, subdim), dtype=np.float32)
    # one sub-seed per subspace, derived from the quantizer seed
    sub_seeds = np.random.SeedSequence(seed).spawn(m)
    for j in range(m):
        sub = x[:, j * subdim:(j + 1) * subdim]
        sub_rng_seed = int(sub_seeds[j].generate_state(1)[0])
        centroids[j] = kmeans(sub, NUM_CENTROIDS, seed=sub_rng_seed, max_iter=max_iter, tol=tol)
    return PQCodebook(pq_id=pq_id, centroids=centroids)


def encode_batch(vectors, cb: PQCodebook) -> np.ndarray:
    """Encode rows of ``vectors``; returns an (n, m) uint8 array."""
    x = _as_matrix(vectors)
    if x.shape[1] != cb.dim:
        raise DimensionMismatchError(f"vector dimension {x.shape[1]} != codebook dimension {cb.dim}")
    n = x.shape[0]
    codes = np.empty((n, cb.m), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    cents = cb.centroids.astype(np.float64)
    for j in range(cb.m):
        sub = np.ascontiguousarray(x[:, j * cb.subdim:(j + 1) * cb.subdim], dtype=np.float64)
        # strict improvement only, so ties keep the lowest centroid index
        _kernels.nearest_centroid(sub, cents[j], labels, best)
        codes[:, j] = labels
    return codes


def encode(v, cb: PQCodebook) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 1:
        raise DimensionMismatchError(f"expected a single vector, got shape {v.shape}")
    return encode_batch(v[None, :], cb)[0]


def distance_table(q, cb: PQCodebook) -> np.ndarray:
    """(m, 256) float32 table of squared distances from each query slice to each centroid."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != cb.dim:
        raise DimensionMismatchError(f"query shape {q.shape} does not match codebook dimension {cb.dim}")
    diff = cb.centroids.astype(np.float64) - q.reshape(cb.m, 1, cb.subdim)
    return np.einsum("mkd,mkd->mk", diff, diff).astype(np.float32)


def adc(code, table: np.ndarray) -> np.float32:
    """Asymmetric distance of one code: table entries summed in ascending subspace order."""
    if len(code) != table.shape[0]:
        raise DimensionMismatchError(f"code length {len(code)} != table rows {table.shape[0]}")
    acc = np.float32(0.0)
    for j, c in enumerate(code):
        acc = acc + table[j, c]
    return acc


def batch_adc(codes, table: np.ndarray) -> np.ndarray:
    """Subspace-major evaluation of :func:`adc` over many codes.

    The outer loop walks subspaces so one table row stays hot while every
    code is visited; each element still accumulates in ascending subspace
    order, so results are bit-identical to :func:`adc`.
    """
    if isinstance(codes, np.ndarray) and codes.ndim == 2:
        arr = codes
    elif len(codes) == 0:
        return np.zeros(0, dtype=np.float32)
    else:
        lengths = {len(c) for c in codes}
        if len(lengths) > 1:
            raise DimensionMismatchError(f"mixed code lengths {sorted(lengths)}")
        arr = np.asarray(list(codes), dtype=np.uint8).reshape(len(codes), -1)
    out = np.zeros(arr.shape[0], dtype=np.float32)
    if arr.shape[0] == 0:
        return out
    if arr.shape[1] != table.shape[0]:
        raise DimensionMismatchError(f"code length {arr.shape[1]} != table rows {table.shape[0]}")
    for j in range(table.shape[0]):
        out += table[j, arr[:, j]]
    return out
