"""K-means behavior and matched label metrics."""

import numpy as np
import pytest

from texturekit.cluster import KMeansResult, evaluate_labels, kmeans
from texturekit.errors import ClusterError
from texturekit.grid import Rng


def blobs(rng, centers, per, spread=0.05):
    pts = []
    truth = []
    for i, c in enumerate(centers):
        pts.append(np.asarray(c) + rng.normal(size=(per, len(c))) * spread)
        truth.extend([i] * per)
    return np.concatenate(pts, axis=0), np.array(truth)


class TestKMeans:
    def test_recovers_separated_blobs(self):
        rng = Rng(5)
        pts, truth = blobs(rng, [(0, 0), (10, 0), (0, 10)], per=30)
        res = kmeans(pts, 3, Rng(1))
        # each true blob maps to exactly one predicted cluster
        for i in range(3):
            assert len(set(res.labels[truth == i])) == 1
        assert len(set(res.labels)) == 3

    def test_deterministic_for_equal_seeds(self):
        rng = Rng(6)
        pts, _ = blobs(rng, [(0, 0), (5, 5)], per=20)
        a = kmeans(pts, 2, Rng(42))
        b = kmeans(pts, 2, Rng(42))
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.centers, b.centers)

    def test_k_equals_one_gives_mean_center(self):
        rng = Rng(7)
        pts = rng.normal(size=(50, 3))
        res = kmeans(pts, 1, Rng(0))
        assert np.allclose(res.centers[0], pts.mean(axis=0))

    def test_too_few_points_raises(self):
        with pytest.raises(ClusterError):
            kmeans(np.zeros((2, 2)), 3, Rng(0))

    def test_duplicate_points_still_return_k_centers(self):
        pts = np.array([[0.0, 0.0]] * 10 + [[1.0, 1.0]] * 10)
        res = kmeans(pts, 3, Rng(3))
        assert res.centers.shape == (3, 2)
        assert isinstance(res, KMeansResult)

    def test_inertia_is_within_cluster_squared_distance(self):
        rng = Rng(8)
        pts = rng.normal(size=(40, 2))
        res = kmeans(pts, 4, Rng(9))
        manual = sum(
            float(((pts[i] - res.centers[res.labels[i]]) ** 2).sum())
            for i in range(len(pts))
        )
        assert res.inertia == pytest.approx(manual, rel=1e-12)


class TestEvaluateLabels:
    def test_perfect_prediction(self):
        truth = np.array([[0, 0, 1], [1, 2, 2]])
        out = evaluate_labels([truth.copy()], [truth])
        assert out.accuracy == 1.0
        assert out.mean_iou == 1.0
        assert out.macro_f1 == 1.0

    def test_invariant_to_class_permutation(self):
        rng = Rng(10)
        truth = rng.integers(0, 3, size=(16, 16))
        perm = np.array([2, 0, 1])
        out = evaluate_labels([perm[truth]], [truth])
        assert out.accuracy == 1.0
        assert out.mean_iou == 1.0

    def test_half_flipped_two_class_metrics(self):
        truth = np.array([0] * 50 + [1] * 50)
        pred = truth.copy()
        pred[50:75] = 0  # half of class 1 mislabeled as class 0
        out = evaluate_labels([pred], [truth])
        assert out.accuracy == pytest.approx(0.75)
        assert out.mean_iou == pytest.approx((50 / 75 + 25 / 50) / 2)
        assert out.macro_f1 == pytest.approx((100 / 125 + 50 / 75) / 2)

    def test_extra_predicted_class_is_handled(self):
        truth = np.array([0] * 10 + [1] * 10)
        pred = truth.copy()
        pred[5] = 2
        out = evaluate_labels([pred], [truth])
        assert 0.9 <= out.accuracy < 1.0

    def test_mismatched_lengths_raise(self):
        with pytest.raises(ClusterError):
            evaluate_labels([np.zeros(4, dtype=int)], [])
