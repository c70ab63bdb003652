"""
tests/test_evaluation.py — MIS, FID and the shared evaluation classifier.

Run with: pytest tests/test_evaluation.py -v
"""
import numpy as np
import pytest

from app.services.evaluation import (
    ClassifierRecipe,
    EvalClassifier,
    c_rg,
    c_rt,
    fid,
    fid_images,
    mis_from_probs,
    train_classifier,
)
from app.services.synthetic import gen_shapes


@pytest.fixture(scope="module")
def shapes():
    return gen_shapes(seed=0, count=300, m=3)


@pytest.fixture(scope="module")
def classifier(shapes):
    x, y = shapes.split("train")
    return train_classifier(x, y, 3, ClassifierRecipe(epochs=100))


# ---------------------------------------------------------------------------
# MIS
# ---------------------------------------------------------------------------

class TestMis:
    def test_single_confident_class_scores_one(self):
        probs = np.tile([0.0, 1.0, 0.0, 0.0], (10, 1))
        assert mis_from_probs(probs) == pytest.approx(1.0)

    def test_confident_and_balanced_scores_m(self):
        probs = np.tile(np.eye(4), (5, 1))
        assert mis_from_probs(probs) == pytest.approx(4.0)

    def test_uniform_predictions_score_one(self):
        assert mis_from_probs(np.full((6, 3), 1 / 3)) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------

class TestFid:
    def test_identical_sets_are_zero(self):
        x = np.random.default_rng(0).normal(size=(400, 5))
        assert fid(x, x) == pytest.approx(0.0, abs=1e-8)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(300, 4)), rng.normal(1.0, 2.0, size=(300, 4))
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-8)

    def test_mean_shift_adds_squared_distance(self):
        x = np.random.default_rng(2).normal(size=(500, 3))
        shift = np.array([1.0, -2.0, 0.5])
        assert fid(x, x + shift) == pytest.approx(float(shift @ shift), abs=1e-8)

    def test_scaled_gaussian(self):
        x = np.random.default_rng(3).normal(size=(500, 2))
        x = x - x.mean(axis=0)
        cov = np.cov(x, rowvar=False)
        expected = np.trace(cov) + 4 * np.trace(cov) - 2 * 2 * np.trace(cov)
        assert fid(x, 2 * x) == pytest.approx(expected, abs=1e-8)

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError):
            fid(np.zeros((3, 4)), np.zeros((10, 4)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fid(np.zeros((10, 3)), np.zeros((10, 4)))

    def test_image_fid_floor(self, classifier, shapes):
        with pytest.raises(ValueError):
            fid_images(classifier, shapes.images, shapes.images)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

class TestClassifier:
    def test_learns_the_shapes(self, classifier, shapes):
        x, y = shapes.split("train")
        assert classifier.accuracy(x, y) >= 80.0

    def test_embedding_width(self, classifier, shapes):
        assert classifier.embed(shapes.images[:5]).shape == (5, 16)

    def test_probabilities(self, classifier, shapes):
        probs = classifier.predict_proba(shapes.images[:7])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_recipe_key(self):
        assert ClassifierRecipe().key() == ClassifierRecipe().key()
        assert ClassifierRecipe().key() != ClassifierRecipe(seed=1).key()

    def test_same_recipe_same_classifier(self, shapes):
        x, y = shapes.split("train")
        recipe = ClassifierRecipe(epochs=2)
        a = train_classifier(x, y, 3, recipe).predict_proba(x[:5])
        b = train_classifier(x, y, 3, recipe).predict_proba(x[:5])
        np.testing.assert_array_equal(a, b)

    def test_soft_labels_and_length_check(self, shapes):
        x, y = shapes.split("train")
        clf = EvalClassifier(64, 3, ClassifierRecipe(epochs=1))
        clf.fit(x, np.eye(3)[y])
        with pytest.raises(ValueError):
            clf.fit(x, y[:-1])

    def test_empty_accuracy_is_nan(self, classifier):
        assert np.isnan(classifier.accuracy(np.zeros((0, 8, 8)), np.zeros(0)))

    def test_crt_and_crg_on_real_data(self, shapes):
        x, y = shapes.split("train")
        tx, ty = shapes.split("test")
        recipe = ClassifierRecipe(epochs=5)
        assert 0.0 <= c_rt(x, y, tx, ty, 3, recipe) <= 100.0
        assert 0.0 <= c_rg(tx, ty, x, y, 3, recipe) <= 100.0

    def test_crt_with_shuffled_labels_is_chance(self, shapes):
        x, y = shapes.split("train")
        other = gen_shapes(seed=5, count=600, m=3)
        shuffled = np.random.default_rng(0).permutation(other.labels)
        score = c_rt(x, y, other.images, shuffled, 3, ClassifierRecipe(epochs=100))
        assert abs(score - 100.0 / 3) < 10.0
