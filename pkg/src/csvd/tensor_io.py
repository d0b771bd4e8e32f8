"""Embedding tables and hidden-state batches: binary formats and synthesis.

On-disk precision is float32 (deployment weights); everything is promoted
to float64 in memory so the bound and certificate arithmetic runs in one
precision.  Because the in-memory values are exact promotions of float32,
save(load(f)) round-trips byte-identically.

CSVD layout (little-endian):
    magic "CSVD" | u32 version=1 | u64 V | u64 d | u8 dtype=0 (f32)
    | 7 reserved bytes | V*d f32 weights row-major | V f32 biases

CSVH layout (little-endian):
    magic "CSVH" | u32 version=1 | u64 count | u64 d | count*d f32
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from ._linalg import as_f64, l2_norm

__all__ = [
    "EmbeddingTable",
    "QueryBatch",
    "FormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "NonFiniteEntryError",
    "load_embedding_table",
    "save_embedding_table",
    "load_query_batch",
    "save_query_batch",
    "synth_vocab",
    "table_fingerprint",
]

_CSVD_MAGIC = b"CSVD"
_CSVH_MAGIC = b"CSVH"
_VERSION = 1
_CSVD_HEADER = struct.Struct("<4sIQQB7x")
_CSVH_HEADER = struct.Struct("<4sIQQ")


class FormatError(Exception):
    """Base class for binary-format failures."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFiniteEntryError(FormatError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    """Output-layer weight matrix (V x d) plus bias vector, float64 in memory."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = as_f64(self.weights)
        b = as_f64(self.bias)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"weights must be V x d with V,d >= 1, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias must have length V={w.shape[0]}, got shape {b.shape}")
        if not np.isfinite(w).all() or not np.isfinite(b).all():
            raise NonFiniteEntryError("table contains non-finite entries")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class QueryBatch:
    """Hidden-state vectors with their precomputed L2 norms."""

    vectors: np.ndarray
    norms: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        v = as_f64(self.vectors)
        if v.ndim != 2:
            raise ValueError(f"vectors must be 2-d, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteEntryError("query batch contains non-finite entries")
        object.__setattr__(self, "vectors", v)
        if self.norms is None:
            norms = np.array([l2_norm(row) for row in v])
        else:
            norms = as_f64(self.norms)
            recomputed = np.array([l2_norm(row) for row in v])
            scale = np.maximum(recomputed, 1e-300)
            if np.any(np.abs(norms - recomputed) > 1e-12 * scale):
                raise ValueError("stored norms disagree with recomputed L2 norms")
        object.__setattr__(self, "norms", norms)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.vectors.shape[1]


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"expected {n} bytes for {what}, got {len(buf)}")
    return buf


def load_embedding_table(path) -> EmbeddingTable:
    with open(path, "rb") as f:
        header = _read_exact(f, _CSVD_HEADER.size, "header")
        magic, version, v, d, dtype = _CSVD_HEADER.unpack(header)
        if magic != _CSVD_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {_CSVD_MAGIC!r}")
        if version != _VERSION:
            raise VersionMismatchError(f"unsupported version {version}")
        if dtype != 0:
            raise VersionMismatchError(f"unsupported dtype code {dtype}")
        if v < 1 or d < 1:
            raise FormatError(f"invalid dims V={v}, d={d}")
        weights = np.frombuffer(
            _read_exact(f, 4 * v * d, "weights"), dtype="<f4"
        ).reshape(v, d)
        bias = np.frombuffer(_read_exact(f, 4 * v, "bias"), dtype="<f4")
        if f.read(1):
            raise TruncatedPayloadError("trailing bytes after payload")
    if not np.isfinite(weights).all() or not np.isfinite(bias).all():
        raise NonFiniteEntryError("file contains non-finite entries")
    return EmbeddingTable(weights=weights.astype(np.float64), bias=bias.astype(np.float64))


def save_embedding_table(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as f:
        f.write(
            _CSVD_HEADER.pack(_CSVD_MAGIC, _VERSION, table.vocab_size, table.hidden_dim, 0)
        )
        f.write(table.weights.astype("<f4").tobytes())
        f.write(table.bias.astype("<f4").tobytes())


def load_query_batch(path) -> QueryBatch:
    with open(path, "rb") as f:
        header = _read_exact(f, _CSVH_HEADER.size, "header")
        magic, version, count, d = _CSVH_HEADER.unpack(header)
        if magic != _CSVH_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {_CSVH_MAGIC!r}")
        if version != _VERSION:
            raise VersionMismatchError(f"unsupported version {version}")
        vectors = np.frombuffer(
            _read_exact(f, 4 * count * d, "vectors"), dtype="<f4"
        ).reshape(count, d)
        if f.read(1):
            raise TruncatedPayloadError("trailing bytes after payload")
    if not np.isfinite(vectors).all():
        raise NonFiniteEntryError("file contains non-finite entries")
    return QueryBatch(vectors=vectors.astype(np.float64))


def save_query_batch(batch: QueryBatch, path) -> None:
    with open(path, "wb") as f:
        f.write(_CSVH_HEADER.pack(_CSVH_MAGIC, _VERSION, len(batch), batch.hidden_dim))
        f.write(batch.vectors.astype("<f4").tobytes())


def synth_vocab(
    V: int, d: int, n_modes: int, spread: float, seed: int
) -> EmbeddingTable:
    """Gaussian-mixture embedding table, deterministic in all arguments.

    Rows are drawn as center[mode] + spread * noise with standard-normal
    mode centers; biases are uniform in [-1, 1].  Values pass through
    float32 so the table round-trips bit-exactly through the CSVD format.
    """
    if V < 1 or d < 1:
        raise ValueError("V and d must be >= 1")
    if not 1 <= n_modes <= V:
        raise ValueError(f"need 1 <= n_modes <= V, got n_modes={n_modes}, V={V}")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_modes, d))
    assignment = rng.integers(0, n_modes, size=V)
    noise = rng.standard_normal((V, d))
    weights = centers[assignment] + spread * noise
    bias = rng.uniform(-1.0, 1.0, size=V)
    return EmbeddingTable(
        weights=weights.astype(np.float32).astype(np.float64),
        bias=bias.astype(np.float32).astype(np.float64),
    )


def table_fingerprint(table: EmbeddingTable) -> bytes:
    """32-byte content hash over the exact on-disk representation."""
    h = hashlib.sha256()
    h.update(_CSVD_MAGIC)
    h.update(struct.pack("<QQ", table.vocab_size, table.hidden_dim))
    h.update(table.weights.astype("<f4").tobytes())
    h.update(table.bias.astype("<f4").tobytes())
    return h.digest()
