"""Offline cluster metadata: K-means build, radii, bias tables, permutation.

Three clustering modes share one code path:

* ``euclidean``       - Lloyd's on the raw rows.
* ``spherical``       - Lloyd's on unit-normalized rows (cosine assignment);
                        the angular radius of each cluster is recorded so the
                        online side can use cone bounds.
* ``bias_augmented``  - Lloyd's on the (d+1)-dim rows [W_i, b_i], matched at
                        query time against [h, 1] so the bias rides inside
                        the geometry.

Builds are pure functions of (table, C, mode, iters, m, seed): assignment
ties resolve to the lowest cluster id, repaired empty clusters steal the
farthest point with the lowest id, clusters are emitted largest first with
members in ascending original id.  All stored statistics are recomputed
from the final member lists by the same helper `validate_index` uses, so
validation compares exactly, not within a tolerance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._linalg import as_f64, gemv_rows, l2_norm
from .tensor_io import (
    BadMagicError,
    EmbeddingTable,
    TruncatedPayloadError,
    VersionMismatchError,
    _read_exact,
    table_fingerprint,
)

__all__ = [
    "ClusterMeta",
    "ClusterIndex",
    "ValidationReport",
    "Violation",
    "FingerprintMismatchError",
    "MODES",
    "build_index",
    "validate_index",
    "save_index",
    "load_index",
    "default_cluster_count",
]

MODES = ("euclidean", "spherical", "bias_augmented")
_MODE_CODE = {m: i for i, m in enumerate(MODES)}

_CSVI_MAGIC = b"CSVI"
_CSVI_HEADER = struct.Struct("<4sIBQQQH32s")


class FingerprintMismatchError(Exception):
    """Index was built from a different table."""


def default_cluster_count(V: int) -> int:
    # fitted optimum from the ablation: about 1.5% of the vocabulary
    return max(1, round(0.015 * V))


@dataclass(frozen=True)
class ClusterMeta:
    centroid: np.ndarray
    centroid_norm: float
    radius: float
    angular: float  # max member angle to the centroid direction; 0 outside spherical mode
    max_bias: float
    max_norm: float  # largest / smallest member row norm in the mode's geometry
    min_norm: float
    bias_topm: tuple  # ((bias, token_id), ...) descending by bias, id-ascending ties
    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass
class ClusterIndex:
    clusters: list
    perm: np.ndarray  # permuted position -> original token id
    mode: str
    vocab_size: int
    hidden_dim: int
    bias_depth: int
    fingerprint: bytes

    # stacked per-cluster arrays, derived in __post_init__ for the hot path
    centroids: np.ndarray = field(init=False, repr=False)
    centroid_norms: np.ndarray = field(init=False, repr=False)
    radii: np.ndarray = field(init=False, repr=False)
    angulars: np.ndarray = field(init=False, repr=False)
    max_biases: np.ndarray = field(init=False, repr=False)
    max_norms: np.ndarray = field(init=False, repr=False)
    min_norms: np.ndarray = field(init=False, repr=False)
    sizes: np.ndarray = field(init=False, repr=False)
    starts: np.ndarray = field(init=False, repr=False)
    ends: np.ndarray = field(init=False, repr=False)
    inv_perm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cs = self.clusters
        self.centroids = np.stack([c.centroid for c in cs])
        self.centroid_norms = np.array([c.centroid_norm for c in cs])
        self.radii = np.array([c.radius for c in cs])
        self.angulars = np.array([c.angular for c in cs])
        self.max_biases = np.array([c.max_bias for c in cs])
        self.max_norms = np.array([c.max_norm for c in cs])
        self.min_norms = np.array([c.min_norm for c in cs])
        self.sizes = np.array([c.size for c in cs], dtype=np.int64)
        self.starts = np.array([c.start for c in cs], dtype=np.int64)
        self.ends = np.array([c.end for c in cs], dtype=np.int64)
        self.perm = np.ascontiguousarray(self.perm, dtype=np.int64)
        inv = np.empty(self.vocab_size, dtype=np.int64)
        inv[self.perm] = np.arange(self.vocab_size)
        self.inv_perm = inv

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def members(self, c: int) -> np.ndarray:
        """Original token ids of cluster c, ascending."""
        return self.perm[self.starts[c] : self.ends[c]]


@dataclass(frozen=True)
class Violation:
    kind: str  # partition | radius | angular | bias | norm
    cluster: int  # -1 for index-wide problems
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations


def _geometry_rows(table: EmbeddingTable, mode: str) -> np.ndarray:
    if mode == "bias_augmented":
        return np.hstack([table.weights, table.bias[:, None]])
    return table.weights


def _assignment_rows(geo: np.ndarray, mode: str) -> np.ndarray:
    if mode != "spherical":
        return geo
    norms = np.sqrt((geo * geo).sum(axis=1))
    unit = np.zeros_like(geo)
    nz = norms > 0
    unit[nz] = geo[nz] / norms[nz, None]
    return unit


def _kmeanspp_seed(data: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: D^2-sample a few candidates per step, keep the one
    that lowers the potential the most.  Deterministic given the generator."""
    n = data.shape[0]
    n_candidates = 2 + int(np.log(C)) if C > 1 else 1
    chosen = np.zeros(n, dtype=bool)
    idx = int(rng.integers(n))
    centers = [idx]
    chosen[idx] = True
    d2 = ((data - data[idx]) ** 2).sum(axis=1)
    for _ in range(1, C):
        total = float(d2.sum())
        if total > 0:
            cum = np.cumsum(d2)
            picks = np.searchsorted(cum, rng.random(n_candidates) * total, side="right")
            picks = np.minimum(picks, n - 1)
            best_idx, best_d2, best_pot = -1, None, np.inf
            for cand in picks:
                cand = int(cand)
                if chosen[cand]:  # only reachable through rounding at the tail
                    continue
                cand_d2 = np.minimum(d2, ((data - data[cand]) ** 2).sum(axis=1))
                pot = float(cand_d2.sum())
                if pot < best_pot:
                    best_idx, best_d2, best_pot = cand, cand_d2, pot
            if best_idx < 0:
                best_idx = int(np.flatnonzero(~chosen)[0])
                best_d2 = np.minimum(d2, ((data - data[best_idx]) ** 2).sum(axis=1))
            idx, d2 = best_idx, best_d2
        else:
            idx = int(np.flatnonzero(~chosen)[0])
            d2 = np.minimum(d2, ((data - data[idx]) ** 2).sum(axis=1))
        centers.append(idx)
        chosen[idx] = True
    return data[np.array(centers)].copy()


def _assign(data: np.ndarray, centers: np.ndarray, spherical: bool) -> np.ndarray:
    cross = data @ centers.T
    if spherical:
        return np.argmax(cross, axis=1)
    c2 = (centers * centers).sum(axis=1)
    return np.argmin(c2[None, :] - 2.0 * cross, axis=1)


def _repair_empty(data, centers, assignment, C):
    """Give every empty cluster the farthest point of a multi-member cluster."""
    sizes = np.bincount(assignment, minlength=C)
    while True:
        empties = np.flatnonzero(sizes == 0)
        if empties.size == 0:
            return assignment
        diff = data - centers[assignment]
        d2 = (diff * diff).sum(axis=1)
        for c in empties:
            eligible = sizes[assignment] >= 2
            if not eligible.any():
                return assignment
            scored = np.where(eligible, d2, -np.inf)
            idx = int(np.argmax(scored))
            sizes[assignment[idx]] -= 1
            assignment[idx] = c
            sizes[c] += 1


def _lloyd(data: np.ndarray, C: int, iters: int, rng, spherical: bool) -> np.ndarray:
    centers = _kmeanspp_seed(data, C, rng)
    assignment = None
    for _ in range(iters):
        new_assignment = _assign(data, centers, spherical)
        new_assignment = _repair_empty(data, centers, new_assignment, C)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            assignment = new_assignment
            break
        assignment = new_assignment
        sums = np.zeros_like(centers)
        np.add.at(sums, assignment, data)
        counts = np.bincount(assignment, minlength=C).astype(np.float64)
        if spherical:
            norms = np.sqrt((sums * sums).sum(axis=1))
            nz = norms > 0
            centers = np.where(nz[:, None], sums / np.where(nz, norms, 1.0)[:, None], centers)
        else:
            centers = sums / counts[:, None]
    return assignment


def _cluster_stats(geo: np.ndarray, bias: np.ndarray, members: np.ndarray, mode: str, m: int):
    """Exact per-cluster statistics from a canonical (ascending) member list.

    Build and validation both call this, so stored values compare with ==.
    """
    rows = geo[members]
    centroid = rows.mean(axis=0)
    centroid_norm = l2_norm(centroid)
    diff = rows - centroid
    radius = float(np.sqrt((diff * diff).sum(axis=1)).max())
    row_norms = np.sqrt((rows * rows).sum(axis=1))
    max_norm = float(row_norms.max())
    min_norm = float(row_norms.min())
    if mode == "spherical":
        if centroid_norm > 0 and (row_norms > 0).all():
            cosines = np.clip(gemv_rows(rows, centroid) / (row_norms * centroid_norm), -1.0, 1.0)
            angular = float(np.arccos(cosines).max())
        else:
            angular = float(np.pi)
    else:
        angular = 0.0
    member_bias = bias[members]
    max_bias = float(member_bias.max())
    order = np.lexsort((members, -member_bias))[: min(m, members.size)]
    topm = tuple((float(member_bias[i]), int(members[i])) for i in order)
    return centroid, centroid_norm, radius, angular, max_bias, max_norm, min_norm, topm


def build_index(
    table: EmbeddingTable,
    C: int,
    mode: str = "euclidean",
    iters: int = 32,
    m: int = 3,
    seed: int = 0,
) -> ClusterIndex:
    V = table.vocab_size
    if not 1 <= C <= V:
        raise ValueError(f"need 1 <= C <= V, got C={C}, V={V}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if m < 1:
        raise ValueError("bias-table depth m must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")

    geo = as_f64(_geometry_rows(table, mode))
    data = _assignment_rows(geo, mode)
    rng = np.random.default_rng(seed)
    assignment = _lloyd(data, C, iters, rng, spherical=(mode == "spherical"))

    member_lists = [np.flatnonzero(assignment == c) for c in range(C)]
    # largest cluster first; equal sizes break toward the smallest member id
    order = sorted(range(C), key=lambda c: (-member_lists[c].size, int(member_lists[c][0])))

    clusters = []
    perm = np.empty(V, dtype=np.int64)
    pos = 0
    for c in order:
        members = member_lists[c]
        start, end = pos, pos + members.size
        perm[start:end] = members
        pos = end
        stats = _cluster_stats(geo, table.bias, members, mode, m)
        centroid, centroid_norm, radius, angular, max_bias, max_norm, min_norm, topm = stats
        clusters.append(
            ClusterMeta(
                centroid=centroid,
                centroid_norm=centroid_norm,
                radius=radius,
                angular=angular,
                max_bias=max_bias,
                max_norm=max_norm,
                min_norm=min_norm,
                bias_topm=topm,
                start=start,
                end=end,
            )
        )
    return ClusterIndex(
        clusters=clusters,
        perm=perm,
        mode=mode,
        vocab_size=V,
        hidden_dim=table.hidden_dim,
        bias_depth=m,
        fingerprint=table_fingerprint(table),
    )


def validate_index(
    index: ClusterIndex, table: EmbeddingTable, check_fingerprint: bool = True
) -> ValidationReport:
    """Brute-force recomputation of every stored statistic and the partition."""
    if check_fingerprint and index.fingerprint != table_fingerprint(table):
        raise FingerprintMismatchError("index fingerprint does not match table")

    violations = []
    V = index.vocab_size
    perm = index.perm
    if not np.array_equal(np.sort(perm), np.arange(V)):
        violations.append(Violation("partition", -1, "permutation is not a bijection on [0, V)"))

    pos = 0
    for c, meta in enumerate(index.clusters):
        if meta.start != pos or meta.end <= meta.start:
            violations.append(
                Violation("partition", c, f"range [{meta.start},{meta.end}) breaks the partition")
            )
        pos = meta.end
    if pos != V:
        violations.append(Violation("partition", -1, f"ranges cover [0,{pos}), expected [0,{V})"))
    if any(v.kind == "partition" for v in violations):
        return ValidationReport(violations=tuple(violations))

    geo = as_f64(_geometry_rows(table, index.mode))
    for c, meta in enumerate(index.clusters):
        members = perm[meta.start : meta.end]
        if not np.all(np.diff(members) > 0):
            violations.append(Violation("partition", c, "members not ascending by original id"))
            continue
        stats = _cluster_stats(geo, table.bias, members, index.mode, index.bias_depth)
        centroid, centroid_norm, radius, angular, max_bias, max_norm, min_norm, topm = stats
        if not np.array_equal(centroid, meta.centroid) or centroid_norm != meta.centroid_norm:
            # the member mean not reproducing the stored centroid means the
            # member set itself changed, i.e. tokens sit in the wrong cluster
            violations.append(
                Violation("partition", c, "member range does not reproduce the stored centroid")
            )
        if radius != meta.radius:
            violations.append(
                Violation("radius", c, f"stored {meta.radius!r} vs recomputed {radius!r}")
            )
        if angular != meta.angular:
            violations.append(
                Violation("angular", c, f"stored {meta.angular!r} vs recomputed {angular!r}")
            )
        if max_bias != meta.max_bias or topm != meta.bias_topm:
            violations.append(Violation("bias", c, "bias statistics do not recompute"))
        if max_norm != meta.max_norm or min_norm != meta.min_norm:
            violations.append(Violation("norm", c, "member norm range does not recompute"))
    return ValidationReport(violations=tuple(violations))


def save_index(index: ClusterIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(
            _CSVI_HEADER.pack(
                _CSVI_MAGIC,
                1,
                _MODE_CODE[index.mode],
                index.n_clusters,
                index.vocab_size,
                index.hidden_dim,
                index.bias_depth,
                index.fingerprint,
            )
        )
        for meta in index.clusters:
            f.write(meta.centroid.astype("<f8").tobytes())
            f.write(
                struct.pack(
                    "<ddddddH",
                    meta.centroid_norm,
                    meta.radius,
                    meta.angular,
                    meta.max_bias,
                    meta.max_norm,
                    meta.min_norm,
                    len(meta.bias_topm),
                )
            )
            for value, token in meta.bias_topm:
                f.write(struct.pack("<dQ", value, token))
            f.write(struct.pack("<QQ", meta.start, meta.end))
        f.write(index.perm.astype("<u8").tobytes())


def load_index(path) -> ClusterIndex:
    with open(path, "rb") as f:
        header = _read_exact(f, _CSVI_HEADER.size, "header")
        magic, version, mode_code, C, V, d, m, fingerprint = _CSVI_HEADER.unpack(header)
        if magic != _CSVI_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {_CSVI_MAGIC!r}")
        if version != 1:
            raise VersionMismatchError(f"unsupported version {version}")
        if mode_code >= len(MODES):
            raise VersionMismatchError(f"unknown mode code {mode_code}")
        mode = MODES[mode_code]
        dg = d + 1 if mode == "bias_augmented" else d
        clusters = []
        for _ in range(C):
            centroid = np.frombuffer(_read_exact(f, 8 * dg, "centroid"), dtype="<f8").copy()
            fixed = struct.unpack("<ddddddH", _read_exact(f, 50, "cluster record"))
            centroid_norm, radius, angular, max_bias, max_norm, min_norm, n_top = fixed
            topm = []
            for _ in range(n_top):
                value, token = struct.unpack("<dQ", _read_exact(f, 16, "bias entry"))
                topm.append((value, int(token)))
            start, end = struct.unpack("<QQ", _read_exact(f, 16, "range"))
            clusters.append(
                ClusterMeta(
                    centroid=centroid,
                    centroid_norm=centroid_norm,
                    radius=radius,
                    angular=angular,
                    max_bias=max_bias,
                    max_norm=max_norm,
                    min_norm=min_norm,
                    bias_topm=tuple(topm),
                    start=int(start),
                    end=int(end),
                )
            )
        perm = np.frombuffer(_read_exact(f, 8 * V, "permutation"), dtype="<u8").astype(np.int64)
        if f.read(1):
            raise TruncatedPayloadError("trailing bytes after payload")
    return ClusterIndex(
        clusters=clusters,
        perm=perm,
        mode=mode,
        vocab_size=int(V),
        hidden_dim=int(d),
        bias_depth=int(m),
        fingerprint=fingerprint,
    )
