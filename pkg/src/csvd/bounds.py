"""Per-cluster upper bounds on the best member logit for a given query.

The Euclidean form follows from Cauchy-Schwarz on the member-to-centroid
deviation:

    logit_i  =  <W_i, h> + b_i  <=  <mu_c, h> + R_c * ||h|| + max_bias_c

so the bound only needs O(d) work per cluster.  The spherical form is a
cone bound: every member direction lies within angle theta_c of the
centroid direction, so its cosine against the query is at most
cos(max(0, phi_c - theta_c)); member norms lie in [min_norm, max_norm],
and since the cosine factor may be negative the norm that maximizes the
product is picked per sign.  The bias_augmented form is the Euclidean one
on [W_i, b_i] rows against [h, 1] with no separate bias term.

All arithmetic is float64 with a fixed per-cluster evaluation order, and
each cluster's bound depends only on that cluster's metadata, so bounds
computed over any subset of clusters are bit-equal to the corresponding
entries of the full vector (the property the shard simulation leans on).
The default slack is exactly zero; a float32-scale slack mode exists for
callers that feed single-precision queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import NEG_INF, as_f64, gemv_rows, l2_norm
from .cluster_index import ClusterIndex

__all__ = [
    "BoundVector",
    "euclidean_bounds",
    "spherical_bounds",
    "cluster_bounds",
    "raw_bounds_subset",
    "refined_bias_bound",
]

_F32_EPS = float(np.finfo(np.float32).eps)
_ALL = slice(None)


@dataclass(frozen=True)
class BoundVector:
    values: np.ndarray
    mode: str
    query_norm: float
    slack: float

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("bounds must be finite")


def _slack_for(values: np.ndarray, slack_mode: str) -> float:
    if slack_mode == "none":
        return 0.0
    if slack_mode == "f32":
        scale = float(np.abs(values).max(initial=1.0))
        return 4.0 * _F32_EPS * scale
    raise ValueError(f"unknown slack mode {slack_mode!r}")


def _augment_query(index: ClusterIndex, h: np.ndarray) -> np.ndarray:
    h = as_f64(h)
    if index.mode == "bias_augmented":
        if h.shape == (index.hidden_dim,):
            h = np.concatenate([h, [1.0]])
        elif h.shape != (index.hidden_dim + 1,):
            raise ValueError(f"query must have length {index.hidden_dim}")
    elif h.shape != (index.hidden_dim,):
        raise ValueError(f"query must have length {index.hidden_dim}")
    return h


def _euclidean_raw(index: ClusterIndex, h, query_norm, sel) -> np.ndarray:
    raw = gemv_rows(index.centroids[sel], h) + index.radii[sel] * query_norm
    if index.mode == "euclidean":
        raw = raw + index.max_biases[sel]
    return raw


# One-sided widening of the cone in radians.  The arccos/cos round trip in
# the gamma computation can lose an ulp, which would put a zero-angle
# cluster's bound a hair below its own member's logit; the pad converts
# that two-sided rounding into a guaranteed margin at a 1e-12 tightness
# cost.  Exact singletons skip the cone entirely and reuse the member's
# own dot product, which is bit-equal to the dense logit.
_THETA_PAD = 4e-12


def _cone_raw(index: ClusterIndex, h, query_norm, sel) -> np.ndarray:
    cnorms = index.centroid_norms[sel]
    radii = index.radii[sel]
    angulars = index.angulars[sel]
    max_norms = index.max_norms[sel]
    min_norms = index.min_norms[sel]
    dots = gemv_rows(index.centroids[sel], h)

    geom = np.empty(dots.shape[0])
    nz = cnorms > 0
    exact = nz & (radii == 0.0)
    cone = nz & ~exact
    if query_norm > 0:
        cos_phi = np.clip(dots[cone] / (cnorms[cone] * query_norm), -1.0, 1.0)
        gamma = np.cos(
            np.maximum(0.0, np.arccos(cos_phi) - (angulars[cone] + _THETA_PAD))
        )
        geom[cone] = query_norm * np.maximum(max_norms[cone] * gamma, min_norms[cone] * gamma)
    else:
        geom[cone] = 0.0
    geom[exact] = dots[exact]
    # zero centroid direction: fall back to the Euclidean form <0,h> + R||h||
    geom[~nz] = radii[~nz] * query_norm
    return geom + index.max_biases[sel]


def raw_bounds_subset(
    index: ClusterIndex, h: np.ndarray, query_norm: float, cluster_ids
) -> np.ndarray:
    """Slack-free bounds for the given clusters, bit-equal to the full vector."""
    h = _augment_query(index, h)
    if index.mode == "spherical":
        return _cone_raw(index, h, query_norm, cluster_ids)
    return _euclidean_raw(index, h, query_norm, cluster_ids)


def euclidean_bounds(
    index: ClusterIndex, h: np.ndarray, query_norm: float | None = None, slack_mode: str = "none"
) -> BoundVector:
    """Centroid-plus-radius bounds; also serves the bias_augmented mode."""
    if index.mode == "spherical":
        raise ValueError("index mode is spherical; use spherical_bounds")
    h = _augment_query(index, h)
    if query_norm is None:
        query_norm = l2_norm(h)
    raw = _euclidean_raw(index, h, query_norm, _ALL)
    eta = _slack_for(raw, slack_mode)
    return BoundVector(values=raw + eta, mode=index.mode, query_norm=query_norm, slack=eta)


def spherical_bounds(
    index: ClusterIndex,
    h: np.ndarray,
    query_norm: float | None = None,
    slack_mode: str = "none",
    variant: str = "cone",
) -> BoundVector:
    """Cone bounds on unit-clustered rows.

    `variant="additive"` evaluates the alternative parameterization
    ||h|| * (||mu_c|| cos(theta_c) + sin(theta_c)) + max_bias, which ignores
    the query-centroid angle.  It is provided for comparison only and does
    not carry a soundness certificate; everything downstream uses "cone".
    """
    if index.mode != "spherical":
        raise ValueError("index mode is not spherical")
    h = _augment_query(index, h)
    if query_norm is None:
        query_norm = l2_norm(h)
    if variant == "cone":
        raw = _cone_raw(index, h, query_norm, _ALL)
    elif variant == "additive":
        raw = (
            query_norm
            * (index.centroid_norms * np.cos(index.angulars) + np.sin(index.angulars))
            + index.max_biases
        )
    else:
        raise ValueError(f"unknown variant {variant!r}")
    eta = _slack_for(raw, slack_mode)
    return BoundVector(values=raw + eta, mode=index.mode, query_norm=query_norm, slack=eta)


def cluster_bounds(
    index: ClusterIndex, h: np.ndarray, query_norm: float | None = None, slack_mode: str = "none"
) -> BoundVector:
    """Dispatch to the bound family matching the index mode."""
    if index.mode == "spherical":
        return spherical_bounds(index, h, query_norm, slack_mode)
    return euclidean_bounds(index, h, query_norm, slack_mode)


def refined_bias_bound(
    index: ClusterIndex,
    c: int,
    h: np.ndarray,
    exclude: set,
    bias: np.ndarray | None = None,
) -> float:
    """Cluster bound with the max-bias term restricted to unopened members.

    The top-m bias table answers most exclusions; once every tabled entry is
    excluded, the m-th value still upper-bounds all remaining member biases,
    so the result stays sound without the full bias vector.  Passing `bias`
    tightens that tail case to the exact remaining maximum.  Returns -inf
    when every member is excluded.
    """
    meta = index.clusters[c]
    if index.mode == "bias_augmented":
        raise ValueError("bias refinement does not apply to bias_augmented indexes")
    members = index.members(c)
    remaining = [int(t) for t in members if int(t) not in exclude]
    if not remaining:
        return NEG_INF

    h = _augment_query(index, h)
    query_norm = l2_norm(h)
    geom = float(raw_bounds_subset(index, h, query_norm, np.array([c]))[0]) - meta.max_bias

    for value, token in meta.bias_topm:
        if token not in exclude:
            return geom + value
    if bias is not None:
        return geom + float(max(bias[t] for t in remaining))
    # every tabled bias is excluded; the smallest tabled value still dominates the rest
    return geom + meta.bias_topm[-1][0]
