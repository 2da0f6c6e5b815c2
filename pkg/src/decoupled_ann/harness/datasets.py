"""Vector file formats and a seeded synthetic dataset.

``.fvecs``, ``.bvecs`` and ``.ivecs`` files are sequences of records, each a
little-endian int32 dimension followed by that many float32, uint8 or int32
components.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import MalformedRecordError

_FORMATS = {"fvecs": np.dtype("<f4"), "bvecs": np.dtype("u1"), "ivecs": np.dtype("<i4")}


def format_of(path) -> str:
    fmt = Path(path).suffix.lstrip(".")
    if fmt not in _FORMATS:
        raise ValueError(f"unknown vector file format {fmt!r} (expected fvecs, bvecs or ivecs)")
    return fmt


def read_vecs(path, fmt: str | None = None, *, count: int | None = None) -> np.ndarray:
    """Read every record (or the first ``count``). fvecs/bvecs come back as float32, ivecs as int32."""
    fmt = format_of(path) if fmt is None else fmt
    dt = _FORMATS[fmt]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.empty((0, 0), dtype=np.int32 if fmt == "ivecs" else np.float32)
    if raw.size < 4:
        raise MalformedRecordError(f"{path}: truncated header")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise MalformedRecordError(f"{path}: invalid dimension {dim}")
    rec = 4 + dim * dt.itemsize
    if raw.size % rec:
        raise MalformedRecordError(f"{path}: {raw.size} bytes is not a whole number of {rec}-byte records")
    n = raw.size // rec
    if count is not None:
        n = min(n, count)
    rows = raw[: n * rec].reshape(n, rec)
    dims = rows[:, :4].copy().view("<i4").ravel()
    if (dims != dim).any():
        bad = int(np.flatnonzero(dims != dim)[0])
        raise MalformedRecordError(f"{path}: record {bad} has dimension {int(dims[bad])}, expected {dim}")
    body = rows[:, 4:].copy().view(dt).reshape(n, dim)
    return body.astype(np.int32) if fmt == "ivecs" else body.astype(np.float32)


def write_vecs(path, vectors, fmt: str | None = None) -> None:
    fmt = format_of(path) if fmt is None else fmt
    dt = _FORMATS[fmt]
    x = np.asarray(vectors)
    if x.ndim != 2:
        raise ValueError("expected a 2-d array")
    n, dim = x.shape
    if fmt == "bvecs" and (x.min(initial=0) < 0 or x.max(initial=0) > 255):
        raise ValueError("bvecs components must lie in [0, 255]")
    out = np.empty((n, 4 + dim * dt.itemsize), dtype=np.uint8)
    out[:, :4] = np.full((n, 1), dim, dtype="<i4").view(np.uint8)
    out[:, 4:] = np.ascontiguousarray(x.astype(dt)).view(np.uint8).reshape(n, -1)
    out.tofile(path)


def synthetic_mixture(n: int, dim: int, *, clusters: int = 64, decay: float = 1.0, center_scale: float = 2.0,
                      rotate: bool = True, seed: int = 0) -> np.ndarray:
    """Gaussian mixture whose per-axis variance falls off as ``(i + 1) ** -decay``.

    Real embedding sets have a few dominant directions and a long tail; the
    decaying spectrum gives the data a comparable intrinsic dimension. A
    random rotation spreads that structure over all coordinates.
    """
    rng = np.random.default_rng(seed)
    scales = (1.0 + np.arange(dim)) ** (-decay / 2.0)
    centers = rng.standard_normal((clusters, dim)) * scales * center_scale
    labels = rng.integers(clusters, size=n)
    x = centers[labels] + rng.standard_normal((n, dim)) * scales
    if rotate:
        q, _ = np.linalg.qr(np.random.default_rng(seed + 1).standard_normal((dim, dim)))
        x = x @ q
    return (x * 10.0).astype(np.float32)
