"""Geometric kernels: farthest point sampling, kNN search and feature interpolation.

Distances are evaluated as explicit coordinate differences in float64 so each
entry depends only on its own pair of points. That keeps results independent
of point order and makes tie handling exact: every tie is broken by the
smaller index.
"""

from __future__ import annotations

import numpy as np

INTERP_EPS = 1e-8
COINCIDENT_SQ = 1e-10
_CHUNK_ELEMS = 1 << 22


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Matrix of squared Euclidean distances between rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_sq_dist: dimension mismatch {a.shape} vs {b.shape}")
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, _CHUNK_ELEMS // max(1, b.shape[0] * b.shape[1]))
    for s in range(0, a.shape[0], step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` point indices starting at ``seed_index``."""
    cloud = np.asarray(cloud)
    return farthest_point_sample_batch(cloud[None], m, np.array([seed_index]))[0]


def farthest_point_sample_batch(clouds, m: int, seed_indices) -> np.ndarray:
    """Run farthest point sampling on every cloud of a ``[B, N, D]`` array at once.

    Each step picks the point whose squared distance to the nearest already
    selected point is largest; ``np.argmax`` resolves ties to the smallest index.
    Selected points are excluded, so duplicates in the cloud never repeat an index.
    """
    pts = np.asarray(clouds, dtype=np.float64)
    b, n = pts.shape[:2]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    seeds = np.asarray(seed_indices, dtype=np.int64).reshape(b)
    if seeds.min() < 0 or seeds.max() >= n:
        raise ValueError(f"seed index out of range [0, {n})")
    rows = np.arange(b)
    out = np.empty((b, m), dtype=np.int64)
    out[:, 0] = seeds
    mind = np.full((b, n), np.inf)
    mind[rows, seeds] = -1.0
    last = seeds
    for i in range(1, m):
        diff = pts - pts[rows, last][:, None, :]
        np.minimum(mind, np.einsum("bnk,bnk->bn", diff, diff), out=mind)
        last = np.argmax(mind, axis=1)
        mind[rows, last] = -1.0
        out[:, i] = last
    return out


def knn_search(queries, source, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest source points for each query, nearest first."""
    queries = np.asarray(queries)
    source = np.asarray(source)
    n = source.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    return _select_k(pairwise_sq_dist(queries, source), k)


def knn_search_batch(queries, source, k: int) -> np.ndarray:
    """:func:`knn_search` over matching batches ``[B, M, D]`` and ``[B, N, D]``."""
    queries = np.asarray(queries)
    source = np.asarray(source)
    n = source.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    return np.stack([_select_k(pairwise_sq_dist(q, s), k) for q, s in zip(queries, source)])


def _select_k(d: np.ndarray, k: int) -> np.ndarray:
    n = d.shape[1]
    if k == n:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d, part, axis=1)
    kth = pd.max(axis=1)
    # Rows where the k-th distance is shared with an unselected point need the
    # full stable sort to honour the smaller-index rule.
    ambiguous = (d <= kth[:, None]).sum(axis=1) > k
    order = np.lexsort((part, pd), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if ambiguous.any():
        out[ambiguous] = np.argsort(d[ambiguous], axis=1, kind="stable")[:, :k]
    return out


def interpolation_weights(targets, sources, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices ``[T, k]`` and normalized inverse-square-distance weights.

    A target within ``sqrt(COINCIDENT_SQ)`` of a source copies that source exactly.
    """
    targets = np.asarray(targets)
    sources = np.asarray(sources)
    if not 1 <= k <= sources.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {sources.shape[0]}]")
    d = pairwise_sq_dist(targets, sources)
    idx = _select_k(d, k)
    dk = np.take_along_axis(d, idx, axis=1)
    w = 1.0 / (dk + INTERP_EPS)
    hit = dk[:, 0] < COINCIDENT_SQ
    w[hit] = 0.0
    w[hit, 0] = 1.0
    return idx, w / w.sum(axis=1, keepdims=True)


def interpolation_weights_batch(targets, sources, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    pairs = [interpolation_weights(t, s, k) for t, s in zip(targets, sources)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def interpolate_features(targets, sources, source_feats, k: int = 3) -> np.ndarray:
    """Propagate per-source features onto target positions by weighted averaging."""
    feats = np.asarray(source_feats)
    idx, w = interpolation_weights(targets, sources, k)
    return np.einsum("tj,tjc->tc", w, feats[idx].astype(np.float64)).astype(feats.dtype)


def covering_radius(cloud, sample) -> float:
    """Largest distance from any point of ``cloud`` to its nearest sampled point."""
    cloud = np.asarray(cloud)
    return float(np.sqrt(pairwise_sq_dist(cloud, cloud[np.asarray(sample)]).min(axis=1).max()))


def canonical_seed(cloud) -> int:
    """Index of the point closest to the centroid (smallest index on ties)."""
    pts = np.asarray(cloud, dtype=np.float64)
    diff = pts - pts.mean(axis=0)
    return int(np.argmin(np.einsum("nk,nk->n", diff, diff)))
