# src/spatial.py
"""
Exact k-NN / ball queries and inverse-distance feature propagation.

cKDTree only proposes candidates; every answer is re-ranked with
exact_distances() and ordered by (distance, point id), so results are
bit-identical to a brute-force scan that uses the same distance formula.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.spatial import cKDTree

from src.utils.config import IDW_EPSILON, PROPAGATION_K
from src.utils.errors import ShapeError, SpatialIndexError

# candidate radius slack so rounding inside the tree never drops a point
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12


@dataclass(frozen=True)
class PropagationConfig:
    k: int = PROPAGATION_K
    epsilon: float = IDW_EPSILON

    def __post_init__(self):
        if self.k < 1:
            raise SpatialIndexError(f"propagation k must be >= 1, got {self.k}")
        if not self.epsilon > 0:
            raise SpatialIndexError(f"epsilon must be > 0, got {self.epsilon}")


class SpatialIndex:
    """Immutable after build; concurrent queries are safe."""

    def __init__(self, points: np.ndarray):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise SpatialIndexError(f"points must be M x 3, got shape {pts.shape}")
        if len(pts) == 0:
            raise SpatialIndexError("cannot build an index over an empty point set")
        if not np.isfinite(pts).all():
            raise SpatialIndexError("point coordinates must be finite")
        pts.setflags(write=False)
        self.points = pts
        self.tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)


def build_index(points: np.ndarray) -> SpatialIndex:
    return SpatialIndex(points)


def exact_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((points - q) ** 2, axis=1))


def _rank(ids: np.ndarray, dists: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, dists))
    return ids[order], dists[order]


def _slack(r: float) -> float:
    return r * (1.0 + _REL_SLACK) + _ABS_SLACK


# ================= K NEAREST =================

def knn(index: SpatialIndex, q, k: int) -> List[Tuple[int, float]]:
    ids, dists = knn_arrays(index, q, k)
    return [(int(i), float(d)) for i, d in zip(ids, dists)]


def knn_arrays(index: SpatialIndex, q, k: int) -> Tuple[np.ndarray, np.ndarray]:
    m = len(index)
    if k < 1 or k > m:
        raise SpatialIndexError(f"k={k} outside [1, {m}]")
    q = np.asarray(q, dtype=np.float64).reshape(3)

    approx, _ = index.tree.query(q, k=k)
    radius = float(np.max(np.atleast_1d(approx)))
    cand = np.asarray(index.tree.query_ball_point(q, _slack(radius)), dtype=np.int64)
    ids, dists = _rank(cand, exact_distances(index.points[cand], q))
    return ids[:k], dists[:k]


def knn_batch(index: SpatialIndex, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """(ids Q x k, distances Q x k) with the same ordering as knn()."""
    m = len(index)
    if k < 1 or k > m:
        raise SpatialIndexError(f"k={k} outside [1, {m}]")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    nq = len(queries)
    out_ids = np.empty((nq, k), dtype=np.int64)
    out_d = np.empty((nq, k), dtype=np.float64)
    if nq == 0:
        return out_ids, out_d

    extra = min(m, k + 4)
    _, cand = index.tree.query(queries, k=extra)
    cand = np.asarray(cand, dtype=np.int64).reshape(nq, extra)
    diffs = index.points[cand] - queries[:, None, :]
    dists = np.sqrt(np.sum(diffs ** 2, axis=2))

    for row in range(nq):
        ids, d = _rank(cand[row], dists[row])
        # a tie reaching the candidate boundary may hide equal points further out
        if extra < m and d[k - 1] >= d[-1]:
            ids, d = knn_arrays(index, queries[row], k)
        out_ids[row] = ids[:k]
        out_d[row] = d[:k]
    return out_ids, out_d


# ================= BALL QUERY =================

def ball_query(index: SpatialIndex, q, r: float, max_count: int) -> List[int]:
    if not r > 0:
        raise SpatialIndexError(f"ball radius must be > 0, got {r}")
    q = np.asarray(q, dtype=np.float64).reshape(3)
    cand = np.asarray(index.tree.query_ball_point(q, _slack(r)), dtype=np.int64)
    if len(cand) == 0:
        return []
    d = exact_distances(index.points[cand], q)
    keep = d <= r
    ids, _ = _rank(cand[keep], d[keep])
    return [int(i) for i in ids[:max_count]]


def ball_query_batch(index: SpatialIndex, queries: np.ndarray, r: float,
                     max_count: int) -> List[np.ndarray]:
    if not r > 0:
        raise SpatialIndexError(f"ball radius must be > 0, got {r}")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    cand_lists = index.tree.query_ball_point(queries, _slack(r))
    out = []
    for q, cand in zip(queries, cand_lists):
        cand = np.asarray(cand, dtype=np.int64)
        if len(cand) == 0:
            out.append(cand)
            continue
        d = exact_distances(index.points[cand], q)
        keep = d <= r
        ids, _ = _rank(cand[keep], d[keep])
        out.append(ids[:max_count])
    return out


# ================= INVERSE DISTANCE WEIGHTING =================

def idw_weights(distances, cfg: PropagationConfig = PropagationConfig()) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if len(d) == 0:
        raise ShapeError("idw needs at least one neighbor")
    if (d < 0).any():
        raise ShapeError("idw distances must be >= 0")

    hits = d <= cfg.epsilon
    if hits.any():
        # exact hit: take the single nearest coincident neighbor
        w = np.zeros_like(d)
        hit_ids = np.flatnonzero(hits)
        w[hit_ids[np.argmin(d[hit_ids])]] = 1.0
        return w

    inv = 1.0 / np.maximum(d, cfg.epsilon)
    return inv / inv.sum()


def idw_weight_matrix(distances: np.ndarray, cfg: PropagationConfig = PropagationConfig()) -> np.ndarray:
    """Row-wise idw_weights for a Q x k distance matrix."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] == 0:
        raise ShapeError(f"distance matrix must be Q x k, got {d.shape}")

    hits = d <= cfg.epsilon
    inv = 1.0 / np.maximum(d, cfg.epsilon)
    w = inv / inv.sum(axis=1, keepdims=True)

    hit_rows = np.flatnonzero(hits.any(axis=1))
    for row in hit_rows:
        w[row] = idw_weights(d[row], cfg)
    return w


def idw_propagate(q, neighbor_features, distances, cfg: PropagationConfig = PropagationConfig()) -> np.ndarray:
    """
    Inverse-distance interpolation at q: sum_j f_j / d_j over sum_l 1 / d_l,
    where d_j is the distance from q to neighbor j.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (3,) or not np.isfinite(q).all():
        raise ShapeError(f"query must be 3 finite coordinates, got {q.tolist()}")
    feats = np.asarray(neighbor_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if feats.shape[0] != len(d):
        raise ShapeError(f"{feats.shape[0]} neighbor features but {len(d)} distances")
    return idw_weights(d, cfg) @ feats
