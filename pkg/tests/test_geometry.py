import numpy as np
import pytest

from crosscoherence.geometry import (
    ColoredPointCloud,
    GeometryError,
    ball_query,
    chamfer_distance,
    farthest_point_sample,
    normalize_cloud,
)


def cloud(points):
    points = np.asarray(points, dtype=float)
    return ColoredPointCloud(points, np.full_like(points, 0.5))


def naive_chamfer(a, b):
    da = [min(sum((p[i] - q[i]) ** 2 for i in range(3)) for q in b) for p in a]
    db = [min(sum((p[i] - q[i]) ** 2 for i in range(3)) for p in a) for q in b]
    return sum(da) / len(da) + sum(db) / len(db)


def naive_ball_query(points, centers, radius, k):
    out = []
    for c in centers:
        found = [j for j in range(len(points))
                 if sum((points[j][i] - points[c][i]) ** 2 for i in range(3)) <= radius * radius][:k]
        if not found:
            found = [c]
        out.append(found + [found[0]] * (k - len(found)))
    return np.array(out)


def test_normalize_two_points():
    out = normalize_cloud(cloud([[0, 0, 0], [2, 0, 0]]))
    np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]])


def test_normalize_idempotent(rng):
    c = normalize_cloud(cloud(rng.normal(size=(50, 3))))
    np.testing.assert_allclose(normalize_cloud(c).points, c.points, atol=1e-7)


def test_normalize_degenerate():
    out = normalize_cloud(cloud([[3, 3, 3]] * 5))
    assert np.all(out.points == 0)


def test_invalid_clouds_rejected():
    with pytest.raises(GeometryError):
        ColoredPointCloud(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(GeometryError):
        ColoredPointCloud(np.zeros((4, 3)), np.full((4, 3), 1.5))
    with pytest.raises(GeometryError):
        ColoredPointCloud(np.full((4, 3), np.nan), np.zeros((4, 3)))


def test_fps_collinear_example():
    pts = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]]
    assert farthest_point_sample(np.array(pts, float), 2).tolist() == [3, 0]


def test_fps_base_cases(rng):
    pts = rng.normal(size=(20, 3))
    first = farthest_point_sample(pts, 1)
    assert len(first) == 1
    assert sorted(farthest_point_sample(pts, 20).tolist()) == list(range(20))


def test_fps_permutation_invariant(rng):
    pts = rng.normal(size=(100, 3))
    perm = rng.permutation(100)
    a = pts[farthest_point_sample(pts, 16)]
    b = pts[perm][farthest_point_sample(pts[perm], 16)]
    np.testing.assert_array_equal(a, b)


def test_fps_rejects_bad_m(rng):
    with pytest.raises(GeometryError):
        farthest_point_sample(rng.normal(size=(5, 3)), 6)
    with pytest.raises(GeometryError):
        farthest_point_sample(rng.normal(size=(5, 3)), 0)


def test_ball_query_example():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [5, 0, 0]], float)
    assert ball_query(pts, [0], 0.5, 2).tolist() == [[0, 1]]


def test_ball_query_full_coverage_and_isolation(rng):
    pts = rng.random((10, 3))
    assert ball_query(pts, [2, 7], 100.0, 4).tolist() == [[0, 1, 2, 3]] * 2
    grid = np.arange(10, dtype=float)[:, None] * np.array([[1.0, 0, 0]])
    assert ball_query(grid, [4], 0.5, 3).tolist() == [[4, 4, 4]]


def test_ball_query_errors(rng):
    with pytest.raises(GeometryError):
        ball_query(rng.random((5, 3)), [0], 0.0, 2)
    with pytest.raises(GeometryError):
        ball_query(rng.random((5, 3)), [0], 1.0, 0)


def test_chamfer_examples(rng):
    a = rng.random((7, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0, 0], [-1.0, 0, 0]])) == pytest.approx(2.0)


def test_chamfer_matches_naive(rng):
    a, b = rng.random((8, 3)), rng.random((8, 3))
    assert abs(chamfer_distance(a, b) - naive_chamfer(a.tolist(), b.tolist())) < 1e-9


def test_ball_query_matches_naive(rng):
    pts = rng.random((30, 3))
    centers = farthest_point_sample(pts, 6)
    assert np.array_equal(ball_query(pts, centers, 0.3, 5), naive_ball_query(pts.tolist(), centers, 0.3, 5))
