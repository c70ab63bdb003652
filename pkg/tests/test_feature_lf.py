"""
tests/test_feature_lf.py — k-means, feature bank, nearest-centroid feature LF.

Run with: pytest tests/test_feature_lf.py -v
"""
import logging

import numpy as np
import pytest

from app.lfb.feature import (
    FeatureBank,
    build_feature_bank,
    feature_bank_for,
    feature_lf,
    feature_lf_batch,
    kmeans,
    load_feature_bank,
    make_feature_lf,
    nearest_centroid,
    save_feature_bank,
    train_feature_bank,
)
from app.lfb.functions import apply_lfs_batch, build_lf
from app.services.synthetic import gen_shapes


def _blobs(seed=0, per=20):
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    points = np.concatenate([c + rng.normal(0.0, 0.3, (per, 2)) for c in centres])
    truth = np.repeat(np.arange(3), per)
    return points, truth


@pytest.fixture(scope="module")
def bank():
    ds = gen_shapes(seed=0, count=80, m=3)
    train, _ = ds.split("train")
    return train_feature_bank(train, k=3, seed=0, epochs=2)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

class TestKMeans:
    def test_separated_blobs_are_recovered(self):
        points, truth = _blobs()
        result = kmeans(points, 3, seed=1)
        for c in range(3):
            assert len(set(result.assignments[truth == c].tolist())) == 1
        assert len(set(result.assignments.tolist())) == 3

    def test_inertia_never_increases(self):
        points, _ = _blobs(seed=2)
        history = kmeans(points, 3, seed=0).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_same_seed_same_result(self):
        points, _ = _blobs(seed=3)
        a, b = kmeans(points, 3, seed=5), kmeans(points, 3, seed=5)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_identical_points(self):
        result = kmeans(np.ones((6, 2)), 2, seed=0)
        assert result.inertia == 0.0

    @pytest.mark.parametrize("k", [0, 7])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            kmeans(np.zeros((6, 2)), k)


# ---------------------------------------------------------------------------
# Bank
# ---------------------------------------------------------------------------

class TestFeatureBank:
    def test_cluster_means(self):
        feats = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        b = build_feature_bank(feats, np.array([0, 0, 1]), k=2)
        np.testing.assert_allclose(b.v_avg, [[2.0, 0.0], [0.0, 4.0]])
        assert b.empty_clusters == ()

    def test_empty_cluster_gets_global_mean(self, caplog):
        feats = np.array([[0.0, 0.0], [3.0, 3.0], [6.0, 0.0]])
        with caplog.at_level(logging.WARNING, logger="app.lfb.feature"):
            b = build_feature_bank(feats, np.array([0, 0, 2]), k=3)
        np.testing.assert_allclose(b.v_avg[1], [3.0, 1.0])
        assert b.empty_clusters == (1,)
        assert "empty" in caplog.text

    def test_nearest_centroid_prefers_lowest_index_on_ties(self):
        v_avg = np.array([[0.0, 0.0], [2.0, 0.0]])
        assert nearest_centroid(v_avg, np.array([1.0, 0.0]))[0] == 0
        assert nearest_centroid(v_avg, np.array([1.5, 0.0]))[0] == 1

    def test_lf_needs_a_net(self):
        with pytest.raises(ValueError):
            feature_lf_batch(FeatureBank(np.zeros((2, 3)), None), np.zeros((1, 8, 8)))


# ---------------------------------------------------------------------------
# Trained feature LF
# ---------------------------------------------------------------------------

class TestFeatureLF:
    def test_votes_are_one_hot(self, bank):
        images = gen_shapes(seed=9, count=12, m=3).images
        out = feature_lf_batch(bank, images)
        assert out.shape == (12, 3)
        np.testing.assert_array_equal(out.sum(axis=1), 1.0)
        np.testing.assert_array_equal(feature_lf(bank, images[0]), out[0])

    def test_plugs_into_apply(self, bank):
        lf = make_feature_lf(bank, (8, 8), lf_id="feat")
        A = apply_lfs_batch([lf], gen_shapes(seed=9, count=5, m=3).images)
        assert A.shape == (5, 1, 3)
        assert lf.family == "feature"

    def test_save_and_load(self, bank, tmp_path):
        path = tmp_path / "bank.bin"
        save_feature_bank(bank, path)
        loaded = load_feature_bank(path)
        images = gen_shapes(seed=10, count=20, m=3).images
        np.testing.assert_array_equal(loaded.v_avg, bank.v_avg)
        np.testing.assert_allclose(loaded.net.features(images), bank.net.features(images))
        np.testing.assert_array_equal(feature_lf_batch(loaded, images), feature_lf_batch(bank, images))

    def test_registry_entry(self, bank, tmp_path):
        path = tmp_path / "bank.bin"
        save_feature_bank(bank, path)
        lf = build_lf(f"feature bank={path}", 3, (8, 8), "09")
        assert lf.id == "09"
        assert lf.m == 3

    def test_bank_for_reuses_stored_bank(self, bank, tmp_path):
        path = tmp_path / "bank.bin"
        save_feature_bank(bank, path)
        loaded = feature_bank_for(np.zeros((4, 8, 8)), 3, path)
        np.testing.assert_array_equal(loaded.v_avg, bank.v_avg)

    def test_bank_for_trains_and_stores(self, tmp_path):
        train, _ = gen_shapes(seed=1, count=60, m=3).split("train")
        path = tmp_path / "fresh.bin"
        made = feature_bank_for(train, 3, path, seed=0)
        assert path.exists()
        np.testing.assert_array_equal(load_feature_bank(path).v_avg, made.v_avg)

    def test_bank_for_rejects_wrong_cluster_count(self, bank, tmp_path):
        path = tmp_path / "bank.bin"
        save_feature_bank(bank, path)
        with pytest.raises(ValueError, match="3 clusters, need 4"):
            feature_bank_for(np.zeros((4, 8, 8)), 4, path)
