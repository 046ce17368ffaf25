# tests/test_spatial.py
import numpy as np
import pytest

from src.spatial import (
    PropagationConfig,
    ball_query,
    ball_query_batch,
    build_index,
    exact_distances,
    idw_propagate,
    idw_weight_matrix,
    idw_weights,
    knn,
    knn_batch,
)
from src.utils.errors import ShapeError, SpatialIndexError


def _brute_knn(points, q, k):
    d = exact_distances(points, np.asarray(q, dtype=np.float64))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order.tolist(), d[order].tolist()


def _brute_ball(points, q, r, cap):
    d = exact_distances(points, np.asarray(q, dtype=np.float64))
    ids = np.flatnonzero(d <= r)
    order = np.lexsort((ids, d[ids]))
    return ids[order][:cap].tolist()


def _grid_points(rng, n):
    # integer coordinates produce plenty of exact ties
    return rng.integers(0, 5, size=(n, 3)).astype(np.float64)


# ================= K NEAREST =================

def test_knn_matches_brute_force_with_ties(rng):
    points = _grid_points(rng, 80)
    index = build_index(points)
    for _ in range(200):
        q = rng.integers(0, 5, size=3).astype(np.float64)
        k = int(rng.integers(1, 12))
        ids, dists = _brute_knn(points, q, k)
        got = knn(index, q, k)
        assert [i for i, _ in got] == ids
        assert [d for _, d in got] == dists


def test_knn_batch_matches_single_queries(rng):
    points = _grid_points(rng, 60)
    queries = rng.uniform(-1, 6, size=(50, 3))
    index = build_index(points)
    ids, dists = knn_batch(index, queries, 3)
    for row, q in enumerate(queries):
        want_ids, want_d = _brute_knn(points, q, 3)
        assert ids[row].tolist() == want_ids
        np.testing.assert_allclose(dists[row], want_d, rtol=1e-12)


def test_knn_all_duplicates_orders_by_id():
    points = np.zeros((6, 3))
    ids, _ = knn_batch(build_index(points), np.zeros((1, 3)), 4)
    assert ids[0].tolist() == [0, 1, 2, 3]


def test_knn_with_k_equal_to_size():
    points = np.array([[0.0, 0, 0], [2.0, 0, 0], [1.0, 0, 0]])
    assert [i for i, _ in knn(build_index(points), [0, 0, 0], 3)] == [0, 2, 1]


def test_knn_rejects_bad_k():
    index = build_index(np.zeros((3, 3)))
    with pytest.raises(SpatialIndexError):
        knn(index, [0, 0, 0], 4)
    with pytest.raises(SpatialIndexError):
        knn_batch(index, np.zeros((1, 3)), 0)


def test_index_rejects_empty_and_nonfinite():
    with pytest.raises(SpatialIndexError):
        build_index(np.zeros((0, 3)))
    with pytest.raises(SpatialIndexError):
        build_index(np.array([[0.0, np.nan, 0.0]]))


def test_index_points_are_read_only():
    index = build_index(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        index.points[0, 0] = 1.0


# ================= BALL QUERY =================

def test_ball_query_matches_brute_force(rng):
    points = _grid_points(rng, 100)
    index = build_index(points)
    for _ in range(100):
        q = rng.uniform(0, 4, size=3)
        r = float(rng.choice([0.5, 1.0, 1.5, 2.0]))
        cap = int(rng.integers(1, 10))
        assert ball_query(index, q, r, cap) == _brute_ball(points, q, r, cap)


def test_ball_query_includes_boundary():
    points = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert ball_query(build_index(points), [0, 0, 0], 1.0, 5) == [0]


def test_ball_query_batch_empty_ball():
    index = build_index(np.array([[5.0, 5, 5]]))
    out = ball_query_batch(index, np.zeros((2, 3)), 1.0, 4)
    assert [len(ids) for ids in out] == [0, 0]


def test_ball_query_rejects_nonpositive_radius():
    with pytest.raises(SpatialIndexError):
        ball_query(build_index(np.zeros((1, 3))), [0, 0, 0], 0.0, 1)


@pytest.mark.slow
def test_ball_and_knn_large_random_sweep(rng):
    points = rng.normal(size=(2000, 3))
    index = build_index(points)
    queries = rng.normal(size=(10_000, 3))
    ids, _ = knn_batch(index, queries, 3)
    for row in range(0, len(queries), 97):
        assert ids[row].tolist() == _brute_knn(points, queries[row], 3)[0]
    balls = ball_query_batch(index, queries[:500], 0.3, 16)
    for q, got in zip(queries[:500], balls):
        assert got.tolist() == _brute_ball(points, q, 0.3, 16)


# ================= INVERSE DISTANCE WEIGHTING =================

def test_idw_weights_by_hand():
    np.testing.assert_allclose(idw_weights([1.0, 2.0, 4.0]), [4 / 7, 2 / 7, 1 / 7], rtol=1e-12)


def test_idw_propagate_by_hand():
    out = idw_propagate([0.0, 0.0, 0.0], [[1.0], [2.0], [3.0]], [1.0, 2.0, 4.0])
    assert out[0] == pytest.approx(2.75 / 1.75, rel=1e-12)


def test_idw_exact_hit_takes_nearest_coincident():
    np.testing.assert_array_equal(idw_weights([0.0, 1.0, 2.0]), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(idw_weights([1.0, 1e-12, 0.0]), [0.0, 0.0, 1.0])


def test_idw_weight_matrix_rows_sum_to_one(rng):
    d = rng.uniform(0.01, 2.0, size=(20, 3))
    d[4] = [0.0, 0.5, 0.5]
    w = idw_weight_matrix(d)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)
    np.testing.assert_array_equal(w[4], [1.0, 0.0, 0.0])
    for row in (0, 7, 19):
        np.testing.assert_allclose(w[row], idw_weights(d[row]), rtol=1e-12)


def test_idw_rejects_bad_input():
    with pytest.raises(ShapeError):
        idw_weights([])
    with pytest.raises(ShapeError):
        idw_weights([-1.0])
    with pytest.raises(ShapeError):
        idw_propagate([0.0, 0.0, 0.0], [[1.0], [2.0]], [1.0])
    with pytest.raises(ShapeError):
        idw_propagate(None, [[1.0]], [1.0])
    with pytest.raises(ShapeError):
        idw_propagate([0.0, 0.0], [[1.0]], [1.0])
    with pytest.raises(ShapeError):
        idw_propagate([0.0, np.nan, 0.0], [[1.0]], [1.0])


def test_propagation_config_validates():
    with pytest.raises(SpatialIndexError):
        PropagationConfig(k=0)
    with pytest.raises(SpatialIndexError):
        PropagationConfig(epsilon=0.0)
